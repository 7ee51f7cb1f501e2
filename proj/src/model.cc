#include "t2r/model.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "t2r/errors.h"
#include "t2r/ops.h"

namespace t2r {

std::string_view AttentionKindName(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kSoftmax:
      return "softmax";
    case AttentionKind::kMlp:
      return "mlp";
    case AttentionKind::kElu:
      return "elu";
    case AttentionKind::kRfa:
      return "rfa";
  }
  return "?";
}

AttentionKind ParseAttentionKind(std::string_view name) {
  if (name == "softmax") return AttentionKind::kSoftmax;
  return ToAttentionKind(ParseFeatureMap(name));
}

AttentionKind ToAttentionKind(FeatureMapKind kind) {
  switch (kind) {
    case FeatureMapKind::kMlpRelu:
      return AttentionKind::kMlp;
    case FeatureMapKind::kElu:
      return AttentionKind::kElu;
    case FeatureMapKind::kRfa:
      return AttentionKind::kRfa;
  }
  return AttentionKind::kSoftmax;
}

FeatureMapKind ToFeatureMapKind(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kMlp:
      return FeatureMapKind::kMlpRelu;
    case AttentionKind::kElu:
      return FeatureMapKind::kElu;
    case AttentionKind::kRfa:
      return FeatureMapKind::kRfa;
    case AttentionKind::kSoftmax:
      break;
  }
  throw ContractError("softmax attention has no feature map");
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::Normalize() {
  if (causal_kinds.empty()) causal_kinds.assign(layers, AttentionKind::kSoftmax);
  if (seq2seq && cross_kinds.empty()) cross_kinds.assign(layers, AttentionKind::kSoftmax);
  Validate();
}

void ModelConfig::Validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(layers >= 1, "layers must be >= 1");
  need(heads >= 1 && head_dim >= 1, "heads and head_dim must be >= 1");
  need(ffn_dim >= 1, "ffn_dim must be >= 1");
  need(vocab >= 1, "vocab must be >= 1");
  need(max_positions >= 1, "max_positions must be >= 1");
  need(k_causal >= 1 && k_cross >= 1, "feature sizes must be >= 1");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  need(label_smoothing >= 0.0 && label_smoothing < 1.0, "label_smoothing must lie in [0, 1)");
  need(causal_kinds.size() == layers, "causal_kinds needs one entry per layer (got " +
                                          std::to_string(causal_kinds.size()) + ")");
  need(seq2seq ? cross_kinds.size() == layers : cross_kinds.empty(),
       seq2seq ? "cross_kinds needs one entry per layer" : "cross_kinds set on a decoder-only model");
  for (AttentionKind kind : causal_kinds) {
    need(kind != AttentionKind::kElu || k_causal == head_dim,
         "elu keeps the head dimension: k_causal must equal head_dim");
  }
  for (AttentionKind kind : cross_kinds) {
    need(kind != AttentionKind::kElu || k_cross == head_dim,
         "elu keeps the head dimension: k_cross must equal head_dim");
  }
}

namespace {

std::string JoinKinds(const std::vector<AttentionKind>& kinds) {
  std::string out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (i) out += ',';
    out += AttentionKindName(kinds[i]);
  }
  return out;
}

std::vector<AttentionKind> SplitKinds(const std::string& text) {
  std::vector<AttentionKind> kinds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) kinds.push_back(ParseAttentionKind(item));
  }
  return kinds;
}

std::size_t ParseSize(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) {
    throw ConfigError("config key '" + key + "' expects a nonnegative integer, got '" + value + "'");
  }
  return static_cast<std::size_t>(v);
}

double ParseDouble(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
  }
  return v;
}

bool ParseBool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + value + "'");
}

}  // namespace

std::string ModelConfig::ToText() const {
  std::ostringstream out;
  out.precision(17);
  out << "layers=" << layers << "\n"
      << "heads=" << heads << "\n"
      << "head_dim=" << head_dim << "\n"
      << "ffn_dim=" << ffn_dim << "\n"
      << "vocab=" << vocab << "\n"
      << "max_positions=" << max_positions << "\n"
      << "seq2seq=" << (seq2seq ? "true" : "false") << "\n"
      << "causal_kinds=" << JoinKinds(causal_kinds) << "\n"
      << "cross_kinds=" << JoinKinds(cross_kinds) << "\n"
      << "k_causal=" << k_causal << "\n"
      << "k_cross=" << k_cross << "\n"
      << "dropout=" << dropout << "\n"
      << "label_smoothing=" << label_smoothing << "\n"
      << "tie_embeddings=" << (tie_embeddings ? "true" : "false") << "\n";
  return out.str();
}

ModelConfig ModelConfig::FromText(const std::string& text) {
  ModelConfig c;
  c.causal_kinds.clear();
  std::stringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "layers") c.layers = ParseSize(key, value);
    else if (key == "heads") c.heads = ParseSize(key, value);
    else if (key == "head_dim") c.head_dim = ParseSize(key, value);
    else if (key == "ffn_dim") c.ffn_dim = ParseSize(key, value);
    else if (key == "vocab") c.vocab = ParseSize(key, value);
    else if (key == "max_positions") c.max_positions = ParseSize(key, value);
    else if (key == "seq2seq") c.seq2seq = ParseBool(key, value);
    else if (key == "causal_kinds") c.causal_kinds = SplitKinds(value);
    else if (key == "cross_kinds") c.cross_kinds = SplitKinds(value);
    else if (key == "k_causal") c.k_causal = ParseSize(key, value);
    else if (key == "k_cross") c.k_cross = ParseSize(key, value);
    else if (key == "dropout") c.dropout = ParseDouble(key, value);
    else if (key == "label_smoothing") c.label_smoothing = ParseDouble(key, value);
    else if (key == "tie_embeddings") c.tie_embeddings = ParseBool(key, value);
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.Normalize();
  return c;
}

// ---------------------------------------------------------------------------
// Layout

namespace {

void AddAttentionSite(std::vector<ParamSpec>& out, const std::string& site,
                      const ModelConfig& c, AttentionKind kind, std::size_t k) {
  const std::size_t h = c.model_dim();
  const double w_std = 1.0 / std::sqrt(static_cast<double>(h));
  for (const char* p : {"q", "k", "v"}) {
    out.push_back({site + ".w" + p, {h, h}, w_std, 0.0});
    out.push_back({site + ".b" + p, {h}, 0.0, 0.0});
  }
  out.push_back({site + ".wo", {h, h}, w_std, 0.0});
  out.push_back({site + ".bo", {h}, 0.0, 0.0});
  switch (kind) {
    case AttentionKind::kSoftmax:
    case AttentionKind::kElu:
      break;
    case AttentionKind::kMlp:
      out.push_back({site + ".phi.w", {c.heads, k, c.head_dim},
                     1.0 / std::sqrt(static_cast<double>(c.head_dim)), 0.0});
      out.push_back({site + ".phi.b", {c.heads, k}, 0.0, 0.0});
      break;
    case AttentionKind::kRfa:
      out.push_back({site + ".phi.proj", {c.heads, k, c.head_dim}, 1.0, 0.0});
      out.push_back({site + ".phi.sigma", {}, 0.0, std::pow(static_cast<double>(c.head_dim), 0.25)});
      break;
  }
}

void AddNorm(std::vector<ParamSpec>& out, const std::string& name, std::size_t h) {
  out.push_back({name + ".g", {h}, 0.0, 1.0});
  out.push_back({name + ".b", {h}, 0.0, 0.0});
}

void AddFfn(std::vector<ParamSpec>& out, const std::string& name, const ModelConfig& c) {
  const std::size_t h = c.model_dim(), f = c.ffn_dim;
  out.push_back({name + ".w1", {f, h}, 1.0 / std::sqrt(static_cast<double>(h)), 0.0});
  out.push_back({name + ".b1", {f}, 0.0, 0.0});
  out.push_back({name + ".w2", {h, f}, 1.0 / std::sqrt(static_cast<double>(f)), 0.0});
  out.push_back({name + ".b2", {h}, 0.0, 0.0});
}

}  // namespace

std::vector<ParamSpec> ParameterLayout(const ModelConfig& c) {
  const std::size_t h = c.model_dim();
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(h));
  std::vector<ParamSpec> out;
  out.push_back({"tok_emb", {c.vocab, h}, emb_std, 0.0});
  out.push_back({"pos_emb", {c.max_positions, h}, emb_std, 0.0});
  if (!c.tie_embeddings) out.push_back({"out_w", {c.vocab, h}, emb_std, 0.0});
  if (c.seq2seq) {
    for (std::size_t i = 0; i < c.layers; ++i) {
      const std::string p = "enc." + std::to_string(i);
      AddNorm(out, p + ".ln_self", h);
      AddAttentionSite(out, p + ".self", c, AttentionKind::kSoftmax, 0);
      AddNorm(out, p + ".ln_ffn", h);
      AddFfn(out, p + ".ffn", c);
    }
    AddNorm(out, "enc.ln", h);
  }
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    AddNorm(out, p + ".ln_self", h);
    AddAttentionSite(out, p + ".self", c, c.causal_kinds.at(i), c.k_causal);
    if (c.seq2seq) {
      AddNorm(out, p + ".ln_cross", h);
      AddAttentionSite(out, p + ".cross", c, c.cross_kinds.at(i), c.k_cross);
    }
    AddNorm(out, p + ".ln_ffn", h);
    AddFfn(out, p + ".ffn", c);
  }
  AddNorm(out, "dec.ln", h);
  return out;
}

bool IsBuffer(const std::string& name) {
  return name.size() >= 9 && name.compare(name.size() - 9, 9, ".phi.proj") == 0;
}

// ---------------------------------------------------------------------------
// Model

namespace {

Tensor MakeParam(const ParamSpec& spec, Rng& rng) {
  std::vector<double> data(NumElements(spec.shape), spec.fill);
  if (spec.stddev > 0.0) {
    for (double& x : data) x = rng.Normal(0.0, spec.stddev);
  }
  return Tensor(spec.shape, std::move(data), !IsBuffer(spec.name));
}

}  // namespace

void Model::Add(std::string name, Tensor t) {
  if (index_.count(name)) throw ValidationError("tensor '" + name + "' appears twice");
  index_.emplace(name, tensors_.size());
  tensors_.push_back({std::move(name), std::move(t)});
}

Model Model::Init(ModelConfig config, std::uint64_t seed) {
  config.Normalize();
  Model m;
  m.config_ = config;
  Rng rng(seed);
  for (const ParamSpec& spec : ParameterLayout(config)) m.Add(spec.name, MakeParam(spec, rng));
  return m;
}

Model Model::FromTensors(ModelConfig config, std::vector<NamedTensor> tensors,
                         std::map<std::string, std::string> metadata) {
  config.Normalize();
  Model m;
  m.config_ = std::move(config);
  m.metadata_ = std::move(metadata);
  for (auto& nt : tensors) {
    nt.tensor.set_requires_grad(!IsBuffer(nt.name));
    m.Add(std::move(nt.name), std::move(nt.tensor));
  }
  m.Validate();
  return m;
}

const Tensor& Model::Get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("model has no tensor '" + name + "'");
  return tensors_[it->second].tensor;
}

std::vector<NamedTensor> Model::Trainable() const {
  std::vector<NamedTensor> out;
  for (const auto& nt : tensors_) {
    if (!IsBuffer(nt.name)) out.push_back(nt);
  }
  return out;
}

std::size_t Model::ParameterCount() const {
  std::size_t n = 0;
  for (const auto& nt : tensors_) {
    if (!IsBuffer(nt.name)) n += nt.tensor.numel();
  }
  return n;
}

void Model::Validate() const {
  const auto layout = ParameterLayout(config_);
  for (const ParamSpec& spec : layout) {
    auto it = index_.find(spec.name);
    if (it == index_.end()) throw ValidationError("missing tensor '" + spec.name + "'");
    const Tensor& t = tensors_[it->second].tensor;
    if (t.shape() != spec.shape) {
      throw ValidationError("tensor '" + spec.name + "' has shape " + ShapeToString(t.shape()) +
                            ", config implies " + ShapeToString(spec.shape));
    }
  }
  if (tensors_.size() != layout.size()) {
    for (const auto& nt : tensors_) {
      const bool known = std::any_of(layout.begin(), layout.end(),
                                     [&](const ParamSpec& s) { return s.name == nt.name; });
      if (!known) throw ValidationError("unexpected tensor '" + nt.name + "'");
    }
  }
}

Model Model::Clone() const {
  Model m;
  m.config_ = config_;
  m.metadata_ = metadata_;
  for (const auto& nt : tensors_) m.Add(nt.name, nt.tensor.Clone());
  return m;
}

AttentionWeights Model::Attention(const std::string& site) const {
  AttentionWeights w;
  w.heads = config_.heads;
  w.head_dim = config_.head_dim;
  w.wq = Get(site + ".wq");
  w.bq = Get(site + ".bq");
  w.wk = Get(site + ".wk");
  w.bk = Get(site + ".bk");
  w.wv = Get(site + ".wv");
  w.bv = Get(site + ".bv");
  w.wo = Get(site + ".wo");
  w.bo = Get(site + ".bo");
  return w;
}

FeatureMap Model::Phi(const std::string& site, AttentionKind kind, std::size_t k) const {
  FeatureMap phi;
  phi.kind = ToFeatureMapKind(kind);
  phi.heads = config_.heads;
  phi.head_dim = config_.head_dim;
  phi.feature_size = k;
  if (kind == AttentionKind::kMlp) {
    phi.weight = Get(site + ".phi.w");
    phi.bias = Get(site + ".phi.b");
  } else if (kind == AttentionKind::kRfa) {
    phi.weight = Get(site + ".phi.proj");
    phi.sigma = Get(site + ".phi.sigma");
  }
  return phi;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

struct Runner {
  const Model& model;
  ForwardOptions options;

  Tensor MaybeDropout(const Tensor& x) const {
    const double rate = model.config().dropout;
    if (rate > 0.0 && options.dropout_rng) return Dropout(x, rate, *options.dropout_rng);
    return x;
  }

  Tensor Norm(const Tensor& x, const std::string& name) const {
    return LayerNormRows(x, model.Get(name + ".g"), model.Get(name + ".b"));
  }

  Tensor Embed(std::span<const int> tokens, std::size_t batch) const {
    if (batch == 0 || tokens.size() % batch != 0) {
      throw InputError("token count " + std::to_string(tokens.size()) +
                       " is not a multiple of batch " + std::to_string(batch));
    }
    const std::size_t len = tokens.size() / batch;
    if (len == 0) throw InputError("empty token sequence");
    if (len > model.config().max_positions) {
      throw InputError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                       std::to_string(model.config().max_positions));
    }
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % len);
    return MaybeDropout(
        Add(Embedding(model.Get("tok_emb"), tokens), Embedding(model.Get("pos_emb"), positions)));
  }

  Tensor Attend(const std::string& site, AttentionKind kind, std::size_t k, const Tensor& tgt,
                const Tensor& src, const AttentionShape& shape, std::size_t layer,
                AttentionSite where) const {
    const AttentionWeights w = model.Attention(site);
    const TraceSink sink{options.trace, layer, where};
    if (kind == AttentionKind::kSoftmax) return MultiheadAttention(tgt, src, w, nullptr, shape, sink);
    const FeatureMap phi = model.Phi(site, kind, k);
    return MultiheadAttention(tgt, src, w, &phi, shape, sink);
  }

  Tensor Ffn(const Tensor& x, const std::string& p) const {
    const Tensor hidden = Relu(Linear(x, model.Get(p + ".w1"), model.Get(p + ".b1")));
    return Linear(hidden, model.Get(p + ".w2"), model.Get(p + ".b2"));
  }

  Tensor Logits(const Tensor& x) const {
    const Tensor& out = model.config().tie_embeddings ? model.Get("tok_emb") : model.Get("out_w");
    return Linear(Norm(x, "dec.ln"), out, Tensor());
  }

  // Decoder stack; memory is the encoder output for seq2seq models.
  Tensor Decode(Tensor x, std::size_t batch, std::size_t len, const Tensor* memory,
                std::size_t mem_len) const {
    const ModelConfig& c = model.config();
    for (std::size_t i = 0; i < c.layers; ++i) {
      const std::string p = "dec." + std::to_string(i);
      const Tensor a = Norm(x, p + ".ln_self");
      x = Add(x, MaybeDropout(Attend(p + ".self", c.causal_kinds[i], c.k_causal, a, a,
                                     {batch, len, len, c.heads, true}, i, AttentionSite::kSelf)));
      if (memory) {
        const Tensor b = Norm(x, p + ".ln_cross");
        x = Add(x, MaybeDropout(Attend(p + ".cross", c.cross_kinds[i], c.k_cross, b, *memory,
                                       {batch, len, mem_len, c.heads, false}, i,
                                       AttentionSite::kCross)));
      }
      x = Add(x, MaybeDropout(Ffn(Norm(x, p + ".ln_ffn"), p + ".ffn")));
    }
    return Logits(x);
  }
};

}  // namespace

Tensor LmForward(const Model& model, std::span<const int> tokens, std::size_t batch,
                 ForwardOptions options) {
  if (model.config().seq2seq) throw ContractError("LmForward on a sequence-to-sequence model");
  const Runner run{model, options};
  Tensor x = run.Embed(tokens, batch);
  return run.Decode(x, batch, tokens.size() / batch, nullptr, 0);
}

Tensor Encode(const Model& model, std::span<const int> src, std::size_t batch,
              ForwardOptions options) {
  const ModelConfig& c = model.config();
  if (!c.seq2seq) throw ContractError("Encode on a decoder-only model");
  if (src.empty()) throw InputError("empty source sequence");
  const Runner run{model, options};
  Tensor x = run.Embed(src, batch);
  const std::size_t len = src.size() / batch;
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    const Tensor a = run.Norm(x, p + ".ln_self");
    x = Add(x, run.MaybeDropout(run.Attend(p + ".self", AttentionKind::kSoftmax, 0, a, a,
                                           {batch, len, len, c.heads, false}, i,
                                           AttentionSite::kEncoder)));
    x = Add(x, run.MaybeDropout(run.Ffn(run.Norm(x, p + ".ln_ffn"), p + ".ffn")));
  }
  return run.Norm(x, "enc.ln");
}

Tensor Seq2SeqForward(const Model& model, std::span<const int> src, std::span<const int> tgt,
                      std::size_t batch, ForwardOptions options) {
  if (src.empty()) throw InputError("empty source sequence");
  const Tensor memory = Encode(model, src, batch, options);
  const Runner run{model, options};
  Tensor x = run.Embed(tgt, batch);
  return run.Decode(x, batch, tgt.size() / batch, &memory, src.size() / batch);
}

// ---------------------------------------------------------------------------
// Swap

std::vector<std::size_t> KeptLayers(std::size_t layers, int n) {
  if (n <= 0) throw ConfigError("keep_every_nth must be >= 1, got " + std::to_string(n));
  std::vector<std::size_t> kept;
  for (std::size_t l = layers; l-- > 0;) {
    if ((layers - 1 - l) % static_cast<std::size_t>(n) == 0) kept.push_back(l);
  }
  return kept;
}

Model SwapAttention(const Model& source, const SwapSpec& spec) {
  ModelConfig c = source.config();
  std::vector<bool> keep(c.layers, false);
  if (spec.keep_every_nth_from_top) {
    for (std::size_t l : KeptLayers(c.layers, *spec.keep_every_nth_from_top)) keep[l] = true;
  }
  const AttentionKind target = ToAttentionKind(spec.feature_map);
  const bool causal = spec.sites != SwapSites::kCross;
  const bool cross = c.seq2seq && spec.sites != SwapSites::kCausal;
  if (spec.sites == SwapSites::kCross && !c.seq2seq) {
    throw ConfigError("cross-attention swap requested on a decoder-only model");
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    if (keep[l]) continue;
    if (causal) {
      if (IsLinear(c.causal_kinds[l])) {
        throw ContractError("causal attention of layer " + std::to_string(l) + " is already linear");
      }
      c.causal_kinds[l] = target;
    }
    if (cross) {
      if (IsLinear(c.cross_kinds[l])) {
        throw ContractError("cross attention of layer " + std::to_string(l) + " is already linear");
      }
      c.cross_kinds[l] = target;
    }
  }
  if (causal) c.k_causal = spec.k_causal;
  if (cross) c.k_cross = spec.k_cross;
  c.Validate();

  Rng rng(spec.seed);
  std::vector<NamedTensor> tensors;
  for (const ParamSpec& p : ParameterLayout(c)) {
    if (source.Has(p.name)) {
      tensors.push_back({p.name, source.Get(p.name).Clone()});
    } else {
      tensors.push_back({p.name, MakeParam(p, rng)});
    }
  }
  return Model::FromTensors(std::move(c), std::move(tensors), source.metadata());
}

}  // namespace t2r
