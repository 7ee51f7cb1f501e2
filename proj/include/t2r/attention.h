#pragma once

// Softmax multihead attention and its linearized counterpart, plus the
// feature maps phi that turn one into the other.
//
// Head layout: every per-position activation is a row of width heads * dim,
// head h occupying columns [h * dim, (h + 1) * dim).

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "t2r/random.h"
#include "t2r/tensor.h"

namespace t2r {

// Output denominators are clamped to at least this value.
inline constexpr double kDenominatorEps = 1e-6;

enum class FeatureMapKind { kMlpRelu, kElu, kRfa };

std::string_view FeatureMapName(FeatureMapKind kind);
// Accepts "mlp", "mlp-relu", "elu", "rfa".
FeatureMapKind ParseFeatureMap(std::string_view name);

struct FeatureMap {
  FeatureMapKind kind = FeatureMapKind::kMlpRelu;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t feature_size = 0;
  // mlp-relu: learned W_phi [heads x k x d]. rfa: fixed Gaussian projection
  // [heads x k x d], never trained.
  Tensor weight;
  // mlp-relu: learned b_phi [heads x k].
  Tensor bias;
  // rfa: learned scalar temperature.
  Tensor sigma;

  std::size_t LearnableParameterCount() const;
};

// mlp-relu: W_phi ~ N(0, 1/d), b_phi = 0. rfa: projection ~ N(0, 1),
// sigma = d^(1/4). elu requires feature_size == head_dim.
FeatureMap MakeFeatureMap(FeatureMapKind kind, std::size_t heads, std::size_t head_dim,
                          std::size_t feature_size, Rng& rng);

// x[len x heads*d] -> [len x heads*k], elementwise nonnegative (elu and rfa
// strictly positive).
//   mlp-relu: relu(W_phi x + b_phi)
//   elu:      elu(x) + 1
//   rfa:      m^-1/2 exp(w_l . xs / sigma - |xs|^2 / (2 sigma^2)),
//             xs = sqrt(d) x / |x|
Tensor ApplyFeatureMap(const FeatureMap& phi, const Tensor& x);
// Same map on one raw row, without the tape: x has heads*d entries, out
// heads*k.
void ApplyFeatureMapRow(const FeatureMap& phi, std::span<const double> x, std::span<double> out);

struct AttentionWeights {
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  // Per-head W_q, W_k, W_v stacked into [h x h] (head-major rows); biases [h].
  Tensor wq, bq, wk, bk, wv, bv;
  // Output projection [h x h], [h].
  Tensor wo, bo;

  std::size_t model_dim() const { return heads * head_dim; }
  void Validate() const;
  static AttentionWeights Init(std::size_t heads, std::size_t head_dim, Rng& rng);
};

struct Projections {
  Tensor q, k, v;
};

// q_i = W_q x_tgt_i + b_q, k_j = W_k x_src_j + b_k, v_j = W_v x_src_j + b_v for
// all heads at once.
Projections ProjectQkv(const Tensor& x_tgt, const Tensor& x_src, const AttentionWeights& w);

enum class AttentionSite { kSelf, kCross, kEncoder };
std::string_view AttentionSiteName(AttentionSite site);

// Normalized attention coefficients of one head: rows x cols, row i over the
// source positions of target position i.
struct HeadTrace {
  std::size_t layer = 0;
  std::size_t head = 0;
  AttentionSite site = AttentionSite::kSelf;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;

  std::span<const double> Row(std::size_t i) const {
    return std::span<const double>(weights).subspan(i * cols, cols);
  }
};

struct AttentionTrace {
  std::string model_id;
  std::string input_id;
  std::vector<HeadTrace> heads;
};

// Where an attention call should deposit its coefficients, if anywhere.
struct TraceSink {
  AttentionTrace* trace = nullptr;
  std::size_t layer = 0;
  AttentionSite site = AttentionSite::kSelf;
};

// batch independent sequences; targets and sources are stacked row-wise as
// [batch * tgt_len] and [batch * src_len] rows.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t tgt_len = 0;
  std::size_t src_len = 0;
  std::size_t heads = 1;
  bool causal = false;
};

// Per head: out_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j, j <= i when
// causal. Returns concatenated heads [batch*tgt_len x heads*d], before the
// output projection.
Tensor SoftmaxAttention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionShape& shape, TraceSink sink = {});

// Per head: out_i = (phi_q_i . sum_j phi_k_j (x) v_j) / max(phi_q_i . sum_j phi_k_j, eps),
// evaluated with running sums (O(len * k * d)), j <= i when causal.
Tensor LinearAttention(const Tensor& phi_q, const Tensor& phi_k, const Tensor& v,
                       const AttentionShape& shape, TraceSink sink = {});

// Full attention sublayer: projections, similarity (softmax when phi is null),
// head concatenation and output projection.
Tensor MultiheadAttention(const Tensor& x_tgt, const Tensor& x_src, const AttentionWeights& w,
                          const FeatureMap* phi, const AttentionShape& shape,
                          TraceSink sink = {});

}  // namespace t2r
