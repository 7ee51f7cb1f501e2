#pragma once

// Constant-memory autoregressive decoding. Linear attention sites carry the
// running sums (S, z); softmax sites of hybrid models keep a key/value cache
// that grows with the decoded length.

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "t2r/attention.h"
#include "t2r/model.h"
#include "t2r/tensor.h"

namespace t2r {

// Per head: S [k x d] = sum_j phi(k_j) v_j^T, z [k] = sum_j phi(k_j).
class RecurrentState {
 public:
  RecurrentState(std::size_t heads, std::size_t feature_size, std::size_t value_dim);

  // phi_k has heads*k entries, v heads*d.
  void Update(std::span<const double> phi_k, std::span<const double> v);
  // out[heads*d] = (phi_q^T S) / max(phi_q^T z, eps), head by head. Reading a
  // state that has seen no positions is a ContractError.
  void Readout(std::span<const double> phi_q, std::span<double> out) const;

  std::size_t heads() const { return heads_; }
  std::size_t feature_size() const { return k_; }
  std::size_t value_dim() const { return d_; }
  std::size_t step() const { return step_; }
  std::span<const double> s() const { return s_; }
  std::span<const double> z() const { return z_; }
  // heads * k * (d + 1); independent of step.
  std::size_t ElementCount() const { return s_.size() + z_.size(); }

 private:
  std::size_t heads_, k_, d_;
  std::vector<double> s_;
  std::vector<double> z_;
  std::size_t step_ = 0;
};

// Folds every source position into one state. phi_k [M x heads*k],
// v [M x heads*d]; M == 0 is a ContractError.
RecurrentState PrecomputeCrossState(const Tensor& phi_k, const Tensor& v, std::size_t heads);

// The mlp feature map folded into the query/key projections:
// W~ = W_phi W, b~ = b_phi + W_phi b, per head, stacked [heads*k x h].
struct MergedProjection {
  std::size_t heads = 0;
  std::size_t feature_size = 0;
  std::size_t model_dim = 0;
  std::vector<double> wq, bq, wk, bk;

  // out[heads*k] = relu(W~ x + b~).
  void ApplyQ(std::span<const double> x, std::span<double> out) const;
  void ApplyK(std::span<const double> x, std::span<double> out) const;
};

// ConfigError unless phi is mlp-relu.
MergedProjection MergeFeatureMap(const AttentionWeights& w, const FeatureMap& phi);

// Tape-free decoder over `batch` independent streams sharing one model.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Model& model, std::size_t batch = 1);
  ~IncrementalDecoder();
  IncrementalDecoder(const IncrementalDecoder&) = delete;
  IncrementalDecoder& operator=(const IncrementalDecoder&) = delete;

  // Seq2seq only, before the first Step: batch source sequences of equal
  // length back to back. Runs the encoder and fixes the cross-attention states.
  void SetSource(std::span<const int> src);

  // Feeds one token per stream at the next position and returns the logits
  // [batch x V], row-major. Valid until the next call.
  std::span<const double> Step(std::span<const int> tokens);

  std::size_t position() const;
  std::size_t batch() const;
  // Live attention-state elements over all layers and streams: recurrent
  // states, key/value caches and cross-attention state.
  std::size_t AttentionStateElements() const;
  // Cross state of a linear cross-attention layer (ContractError otherwise).
  const RecurrentState& CrossState(std::size_t layer, std::size_t stream) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Attention-state elements per stream for the linear sites of config:
// L * r * k * (d + 1) for causal sites plus the same for linear cross sites.
// Softmax sites are excluded; their cache depends on the decoded length.
std::size_t StateFootprint(const ModelConfig& config);

enum class DecodeMode { kRecurrent, kParallel };

// Greedy continuation of `prompt` by n_steps tokens (the continuation only).
// kParallel recomputes the full teacher-forced forward at every step.
std::vector<int> Generate(const Model& model, std::span<const int> prompt, int n_steps,
                          DecodeMode mode);
// Greedy decode of the target side, seeded with `bos`.
std::vector<int> GenerateSeq2Seq(const Model& model, std::span<const int> src, int bos,
                                 int n_steps, DecodeMode mode);

}  // namespace t2r
