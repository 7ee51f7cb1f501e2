#pragma once

// Decoder-only language models and encoder-decoder models assembled from
// pre-norm attention/feedforward blocks, and the softmax -> linear swap.
//
// A Model is a configuration plus a flat list of named tensors. Names:
//   tok_emb [V x h], pos_emb [P x h], out_w [V x h] (untied only)
//   enc.{i}.ln_self.{g,b}, enc.{i}.self.{wq,bq,wk,bk,wv,bv,wo,bo},
//   enc.{i}.ln_ffn.{g,b}, enc.{i}.ffn.{w1,b1,w2,b2}, enc.ln.{g,b}
//   dec.{i}.ln_self, dec.{i}.self.*, dec.{i}.ln_cross, dec.{i}.cross.*,
//   dec.{i}.ln_ffn, dec.{i}.ffn.*, dec.ln
// Linear sites add {site}.phi.w/.phi.b (mlp) or {site}.phi.proj/.phi.sigma
// (rfa). phi.proj is a fixed buffer and never trained.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "t2r/attention.h"
#include "t2r/optim.h"
#include "t2r/random.h"
#include "t2r/tensor.h"

namespace t2r {

enum class AttentionKind { kSoftmax, kMlp, kElu, kRfa };

std::string_view AttentionKindName(AttentionKind kind);
AttentionKind ParseAttentionKind(std::string_view name);
AttentionKind ToAttentionKind(FeatureMapKind kind);
// Undefined for kSoftmax (ContractError).
FeatureMapKind ToFeatureMapKind(AttentionKind kind);
inline bool IsLinear(AttentionKind kind) { return kind != AttentionKind::kSoftmax; }

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 8;
  std::size_t ffn_dim = 128;
  std::size_t vocab = 16;
  std::size_t max_positions = 64;
  bool seq2seq = false;
  // One entry per decoder layer.
  std::vector<AttentionKind> causal_kinds;
  // One entry per decoder layer when seq2seq, empty otherwise.
  std::vector<AttentionKind> cross_kinds;
  std::size_t k_causal = 16;
  std::size_t k_cross = 16;
  double dropout = 0.0;
  double label_smoothing = 0.0;
  bool tie_embeddings = true;

  std::size_t model_dim() const { return heads * head_dim; }
  // Fills empty kind lists with softmax, then checks every invariant
  // (ConfigError on violation).
  void Normalize();
  void Validate() const;

  std::string ToText() const;
  // key=value lines; unknown keys are a ConfigError.
  static ModelConfig FromText(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

class Model {
 public:
  Model() = default;

  // Fresh random parameters for config.
  static Model Init(ModelConfig config, std::uint64_t seed);
  // Wraps existing tensors; Validate() checks them against the config.
  static Model FromTensors(ModelConfig config, std::vector<NamedTensor> tensors,
                           std::map<std::string, std::string> metadata = {});

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  bool Has(const std::string& name) const { return index_.count(name) != 0; }
  // ValidationError when missing.
  const Tensor& Get(const std::string& name) const;

  // Everything except fixed buffers.
  std::vector<NamedTensor> Trainable() const;
  std::size_t ParameterCount() const;

  // Every tensor named by the config is present exactly once with the right
  // shape and no others exist (ValidationError otherwise).
  void Validate() const;

  // Deep copy; no storage shared with this.
  Model Clone() const;

  AttentionWeights Attention(const std::string& site) const;
  // Feature map of a linear site.
  FeatureMap Phi(const std::string& site, AttentionKind kind, std::size_t k) const;

 private:
  void Add(std::string name, Tensor t);

  ModelConfig config_;
  std::vector<NamedTensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, std::string> metadata_;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  // Normal(0, stddev) when stddev > 0, otherwise every entry is `fill`.
  double stddev = 0.0;
  double fill = 0.0;
};

// Every tensor a config implies, in storage order.
std::vector<ParamSpec> ParameterLayout(const ModelConfig& config);
bool IsBuffer(const std::string& name);

struct ForwardOptions {
  // Dropout is applied only when this is set and config.dropout > 0.
  Rng* dropout_rng = nullptr;
  AttentionTrace* trace = nullptr;
};

// tokens holds `batch` sequences of equal length back to back. Returns causal
// logits [batch*len x V].
Tensor LmForward(const Model& model, std::span<const int> tokens, std::size_t batch = 1,
                 ForwardOptions options = {});

// Encoder output [batch*src_len x h].
Tensor Encode(const Model& model, std::span<const int> src, std::size_t batch = 1,
              ForwardOptions options = {});
Tensor Seq2SeqForward(const Model& model, std::span<const int> src, std::span<const int> tgt,
                      std::size_t batch = 1, ForwardOptions options = {});

enum class SwapSites { kCausal, kCross, kBoth };

struct SwapSpec {
  FeatureMapKind feature_map = FeatureMapKind::kMlpRelu;
  std::size_t k_causal = 16;
  std::size_t k_cross = 16;
  SwapSites sites = SwapSites::kBoth;
  // When set, layer l stays softmax iff (layers - 1 - l) % n == 0.
  std::optional<int> keep_every_nth_from_top;
  std::uint64_t seed = 0;
};

// Layers left untouched by keep_every_nth_from_top = n.
std::vector<std::size_t> KeptLayers(std::size_t layers, int n);

// Converts the selected softmax sites to linear attention with fresh phi
// parameters. All other tensors are copied verbatim.
Model SwapAttention(const Model& source, const SwapSpec& spec);

}  // namespace t2r
