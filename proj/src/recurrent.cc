#include "t2r/recurrent.h"

#include <algorithm>
#include <cmath>
#include <optional>

#include "kernels.h"
#include "t2r/errors.h"

namespace t2r {

RecurrentState::RecurrentState(std::size_t heads, std::size_t feature_size, std::size_t value_dim)
    : heads_(heads),
      k_(feature_size),
      d_(value_dim),
      s_(heads * feature_size * value_dim, 0.0),
      z_(heads * feature_size, 0.0) {}

void RecurrentState::Update(std::span<const double> phi_k, std::span<const double> v) {
  if (phi_k.size() != heads_ * k_ || v.size() != heads_ * d_) {
    throw DimensionError("state update: expected " + std::to_string(heads_ * k_) +
                         " features and " + std::to_string(heads_ * d_) + " values");
  }
  for (std::size_t h = 0; h < heads_; ++h) {
    const double* f = phi_k.data() + h * k_;
    const double* vh = v.data() + h * d_;
    double* s = s_.data() + h * k_ * d_;
    for (std::size_t a = 0; a < k_; ++a) {
      z_[h * k_ + a] += f[a];
      for (std::size_t c = 0; c < d_; ++c) s[a * d_ + c] += f[a] * vh[c];
    }
  }
  ++step_;
}

void RecurrentState::Readout(std::span<const double> phi_q, std::span<double> out) const {
  if (step_ == 0) throw ContractError("readout from a recurrent state with no positions");
  if (phi_q.size() != heads_ * k_ || out.size() != heads_ * d_) {
    throw DimensionError("readout: expected " + std::to_string(heads_ * k_) + " features and " +
                         std::to_string(heads_ * d_) + " outputs");
  }
  for (std::size_t h = 0; h < heads_; ++h) {
    const double* f = phi_q.data() + h * k_;
    const double* s = s_.data() + h * k_ * d_;
    double* o = out.data() + h * d_;
    const double den = std::max(kernels::Dot(f, z_.data() + h * k_, k_), kDenominatorEps);
    std::fill(o, o + d_, 0.0);
    for (std::size_t a = 0; a < k_; ++a) {
      for (std::size_t c = 0; c < d_; ++c) o[c] += f[a] * s[a * d_ + c];
    }
    for (std::size_t c = 0; c < d_; ++c) o[c] /= den;
  }
}

RecurrentState PrecomputeCrossState(const Tensor& phi_k, const Tensor& v, std::size_t heads) {
  if (phi_k.rank() != 2 || v.rank() != 2 || phi_k.size(0) != v.size(0) || heads == 0 ||
      phi_k.size(1) % heads != 0 || v.size(1) % heads != 0) {
    throw DimensionError("cross state: features " + ShapeToString(phi_k.shape()) +
                         " and values " + ShapeToString(v.shape()) + " do not pair up");
  }
  const std::size_t m = phi_k.size(0);
  if (m == 0) throw ContractError("cross state over an empty source");
  RecurrentState state(heads, phi_k.size(1) / heads, v.size(1) / heads);
  const std::size_t fw = phi_k.size(1), vw = v.size(1);
  for (std::size_t j = 0; j < m; ++j) {
    state.Update(phi_k.data().subspan(j * fw, fw), v.data().subspan(j * vw, vw));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Merge

namespace {

void MergeOne(std::span<const double> w, std::span<const double> b, const FeatureMap& phi,
              std::size_t h, std::vector<double>& w_out, std::vector<double>& b_out) {
  const std::size_t r = phi.heads, k = phi.feature_size, d = phi.head_dim;
  w_out.assign(r * k * h, 0.0);
  b_out.assign(r * k, 0.0);
  const auto wphi = phi.weight.data();
  const auto bphi = phi.bias.data();
  for (std::size_t head = 0; head < r; ++head) {
    for (std::size_t a = 0; a < k; ++a) {
      const double* fw = wphi.data() + (head * k + a) * d;
      double* row = w_out.data() + (head * k + a) * h;
      double bias = bphi[head * k + a];
      for (std::size_t c = 0; c < d; ++c) {
        const double* wrow = w.data() + (head * d + c) * h;
        for (std::size_t j = 0; j < h; ++j) row[j] += fw[c] * wrow[j];
        bias += fw[c] * b[head * d + c];
      }
      b_out[head * k + a] = bias;
    }
  }
}

void ReluAffine(const std::vector<double>& w, const std::vector<double>& b, std::size_t rows,
                std::size_t cols, std::span<const double> x, std::span<double> out) {
  if (x.size() != cols || out.size() != rows) throw DimensionError("merged projection: bad width");
  kernels::MatVec(w, rows, cols, x, b, out);
  for (double& v : out) v = std::max(v, 0.0);
}

}  // namespace

MergedProjection MergeFeatureMap(const AttentionWeights& w, const FeatureMap& phi) {
  if (phi.kind != FeatureMapKind::kMlpRelu) {
    throw ConfigError("only the mlp feature map can be merged into the projections, got " +
                      std::string(FeatureMapName(phi.kind)));
  }
  w.Validate();
  if (phi.heads != w.heads || phi.head_dim != w.head_dim) {
    throw DimensionError("feature map and attention disagree on heads/head_dim");
  }
  MergedProjection m;
  m.heads = phi.heads;
  m.feature_size = phi.feature_size;
  m.model_dim = w.model_dim();
  MergeOne(w.wq.data(), w.bq.data(), phi, m.model_dim, m.wq, m.bq);
  MergeOne(w.wk.data(), w.bk.data(), phi, m.model_dim, m.wk, m.bk);
  return m;
}

void MergedProjection::ApplyQ(std::span<const double> x, std::span<double> out) const {
  ReluAffine(wq, bq, heads * feature_size, model_dim, x, out);
}

void MergedProjection::ApplyK(std::span<const double> x, std::span<double> out) const {
  ReluAffine(wk, bk, heads * feature_size, model_dim, x, out);
}

// ---------------------------------------------------------------------------
// Incremental decoder

namespace {

using Span = std::span<const double>;

// y[rows x out] = x[rows x in] W^T + b, W stored [out x in].
void Affine(const double* x, std::size_t rows, std::size_t in, Span w, Span b, std::size_t out,
            double* y) {
  for (std::size_t r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), y + r * out);
  kernels::Gemm(false, true, rows, out, in, x, w.data(), 1.0, y);
}

void ReluInPlace(std::vector<double>& v) {
  for (double& x : v) x = std::max(x, 0.0);
}

struct Site {
  AttentionKind kind = AttentionKind::kSoftmax;
  std::size_t k = 0;
  Span wq, bq, wk, bk, wv, bv, wo, bo;
  std::optional<MergedProjection> merged;
  FeatureMap phi;
};

Site MakeSite(const Model& model, const std::string& name, AttentionKind kind, std::size_t k) {
  Site s;
  s.kind = kind;
  s.k = k;
  s.wq = model.Get(name + ".wq").data();
  s.bq = model.Get(name + ".bq").data();
  s.wk = model.Get(name + ".wk").data();
  s.bk = model.Get(name + ".bk").data();
  s.wv = model.Get(name + ".wv").data();
  s.bv = model.Get(name + ".bv").data();
  s.wo = model.Get(name + ".wo").data();
  s.bo = model.Get(name + ".bo").data();
  if (IsLinear(kind)) {
    s.phi = model.Phi(name, kind, k);
    if (kind == AttentionKind::kMlp) s.merged = MergeFeatureMap(model.Attention(name), s.phi);
  }
  return s;
}

struct Layer {
  Span ln_self_g, ln_self_b, ln_cross_g, ln_cross_b, ln_ffn_g, ln_ffn_b;
  Span w1, b1, w2, b2;
  Site self, cross;
  // Linear self attention, one per stream.
  std::vector<RecurrentState> states;
  // Softmax self attention, one growing [t x h] cache per stream.
  std::vector<std::vector<double>> keys, values;
  // Cross attention, fixed by SetSource.
  std::vector<std::shared_ptr<const RecurrentState>> cross_states;
  std::vector<std::vector<double>> cross_keys, cross_values;
};

// Softmax attention of one query row over a [t x h] cache, all heads.
void SoftmaxRead(const double* q, const std::vector<double>& keys,
                 const std::vector<double>& values, std::size_t heads, std::size_t d,
                 std::vector<double>& scratch, double* out) {
  const std::size_t h = heads * d, t = keys.size() / h;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  scratch.resize(t);
  for (std::size_t head = 0; head < heads; ++head) {
    const double* qh = q + head * d;
    double top = -INFINITY;
    for (std::size_t j = 0; j < t; ++j) {
      scratch[j] = kernels::Dot(qh, keys.data() + j * h + head * d, d) * scale;
      top = std::max(top, scratch[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      scratch[j] = std::exp(scratch[j] - top);
      total += scratch[j];
    }
    double* o = out + head * d;
    std::fill(o, o + d, 0.0);
    for (std::size_t j = 0; j < t; ++j) {
      const double p = scratch[j] / total;
      const double* v = values.data() + j * h + head * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += p * v[c];
    }
  }
}

}  // namespace

struct IncrementalDecoder::Impl {
  const Model& model;
  const ModelConfig& c;
  std::size_t batch;
  std::size_t h;
  std::size_t pos = 0;
  bool source_set = false;
  std::vector<Layer> layers;
  Span tok_emb, pos_emb, out_w, ln_g, ln_b;
  // Scratch, [batch x width].
  std::vector<double> x, a, q, k, v, fq, fk, o, y, hidden, logits, scores;

  Impl(const Model& m, std::size_t b) : model(m), c(m.config()), batch(b), h(c.model_dim()) {
    if (batch == 0) throw ContractError("decoder batch must be >= 1");
    tok_emb = model.Get("tok_emb").data();
    pos_emb = model.Get("pos_emb").data();
    out_w = c.tie_embeddings ? tok_emb : model.Get("out_w").data();
    ln_g = model.Get("dec.ln.g").data();
    ln_b = model.Get("dec.ln.b").data();
    for (std::size_t i = 0; i < c.layers; ++i) {
      const std::string p = "dec." + std::to_string(i);
      Layer L;
      L.ln_self_g = model.Get(p + ".ln_self.g").data();
      L.ln_self_b = model.Get(p + ".ln_self.b").data();
      L.ln_ffn_g = model.Get(p + ".ln_ffn.g").data();
      L.ln_ffn_b = model.Get(p + ".ln_ffn.b").data();
      L.w1 = model.Get(p + ".ffn.w1").data();
      L.b1 = model.Get(p + ".ffn.b1").data();
      L.w2 = model.Get(p + ".ffn.w2").data();
      L.b2 = model.Get(p + ".ffn.b2").data();
      L.self = MakeSite(model, p + ".self", c.causal_kinds[i], c.k_causal);
      if (IsLinear(L.self.kind)) {
        L.states.assign(batch, RecurrentState(c.heads, c.k_causal, c.head_dim));
      } else {
        L.keys.resize(batch);
        L.values.resize(batch);
      }
      if (c.seq2seq) {
        L.ln_cross_g = model.Get(p + ".ln_cross.g").data();
        L.ln_cross_b = model.Get(p + ".ln_cross.b").data();
        L.cross = MakeSite(model, p + ".cross", c.cross_kinds[i], c.k_cross);
      }
      layers.push_back(std::move(L));
    }
  }

  void Norm(const std::vector<double>& in, Span g, Span b, std::vector<double>& out) const {
    out.resize(batch * h);
    for (std::size_t r = 0; r < batch; ++r) {
      kernels::LayerNorm(Span(in).subspan(r * h, h), g, b, 1e-5,
                         std::span<double>(out).subspan(r * h, h));
    }
  }

  // Feature rows for a linear site from projected rows (q or k) or, for mlp,
  // straight from the normalized input through the merged weights.
  void Features(const Site& s, bool query, const std::vector<double>& input,
                const std::vector<double>& projected, std::size_t rows, std::vector<double>& out) {
    const std::size_t fw = c.heads * s.k;
    out.resize(rows * fw);
    if (s.merged) {
      const auto& w = query ? s.merged->wq : s.merged->wk;
      const auto& b = query ? s.merged->bq : s.merged->bk;
      Affine(input.data(), rows, h, w, b, fw, out.data());
      ReluInPlace(out);
      return;
    }
    for (std::size_t r = 0; r < rows; ++r) {
      ApplyFeatureMapRow(s.phi, Span(projected).subspan(r * h, h),
                         std::span<double>(out).subspan(r * fw, fw));
    }
  }

  void SelfAttend(Layer& L) {
    const Site& s = L.self;
    v.resize(batch * h);
    o.resize(batch * h);
    Affine(a.data(), batch, h, s.wv, s.bv, h, v.data());
    if (s.kind == AttentionKind::kSoftmax) {
      q.resize(batch * h);
      k.resize(batch * h);
      Affine(a.data(), batch, h, s.wq, s.bq, h, q.data());
      Affine(a.data(), batch, h, s.wk, s.bk, h, k.data());
      for (std::size_t r = 0; r < batch; ++r) {
        L.keys[r].insert(L.keys[r].end(), k.begin() + r * h, k.begin() + (r + 1) * h);
        L.values[r].insert(L.values[r].end(), v.begin() + r * h, v.begin() + (r + 1) * h);
        SoftmaxRead(q.data() + r * h, L.keys[r], L.values[r], c.heads, c.head_dim, scores,
                    o.data() + r * h);
      }
      return;
    }
    if (!s.merged) {
      q.resize(batch * h);
      k.resize(batch * h);
      Affine(a.data(), batch, h, s.wq, s.bq, h, q.data());
      Affine(a.data(), batch, h, s.wk, s.bk, h, k.data());
    }
    Features(s, true, a, q, batch, fq);
    Features(s, false, a, k, batch, fk);
    const std::size_t fw = c.heads * s.k;
    for (std::size_t r = 0; r < batch; ++r) {
      L.states[r].Update(Span(fk).subspan(r * fw, fw), Span(v).subspan(r * h, h));
      L.states[r].Readout(Span(fq).subspan(r * fw, fw), std::span<double>(o).subspan(r * h, h));
    }
  }

  void CrossAttend(Layer& L) {
    const Site& s = L.cross;
    o.resize(batch * h);
    if (s.kind == AttentionKind::kSoftmax) {
      q.resize(batch * h);
      Affine(a.data(), batch, h, s.wq, s.bq, h, q.data());
      for (std::size_t r = 0; r < batch; ++r) {
        SoftmaxRead(q.data() + r * h, L.cross_keys[r], L.cross_values[r], c.heads, c.head_dim,
                    scores, o.data() + r * h);
      }
      return;
    }
    if (!s.merged) {
      q.resize(batch * h);
      Affine(a.data(), batch, h, s.wq, s.bq, h, q.data());
    }
    Features(s, true, a, q, batch, fq);
    const std::size_t fw = c.heads * s.k;
    for (std::size_t r = 0; r < batch; ++r) {
      L.cross_states[r]->Readout(Span(fq).subspan(r * fw, fw),
                                 std::span<double>(o).subspan(r * h, h));
    }
  }

  void Residual(const Site& s) {
    y.resize(batch * h);
    Affine(o.data(), batch, h, s.wo, s.bo, h, y.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
  }

  void SetSource(std::span<const int> src) {
    if (!c.seq2seq) throw ContractError("SetSource on a decoder-only model");
    if (pos != 0 || source_set) throw ContractError("SetSource must come once, before Step");
    if (src.empty() || src.size() % batch != 0) {
      throw InputError("source of " + std::to_string(src.size()) + " tokens for batch " +
                       std::to_string(batch));
    }
    const std::size_t m = src.size() / batch;
    Tensor memory;
    {
      NoGradGuard guard;
      memory = Encode(model, src, batch);
    }
    const std::vector<double> mem(memory.data().begin(), memory.data().end());
    for (Layer& L : layers) {
      const Site& s = L.cross;
      std::vector<double> kk(mem.size()), vv(mem.size());
      Affine(mem.data(), batch * m, h, s.wv, s.bv, h, vv.data());
      if (s.kind == AttentionKind::kSoftmax) {
        Affine(mem.data(), batch * m, h, s.wk, s.bk, h, kk.data());
        for (std::size_t r = 0; r < batch; ++r) {
          L.cross_keys.emplace_back(kk.begin() + r * m * h, kk.begin() + (r + 1) * m * h);
          L.cross_values.emplace_back(vv.begin() + r * m * h, vv.begin() + (r + 1) * m * h);
        }
        continue;
      }
      if (!s.merged) Affine(mem.data(), batch * m, h, s.wk, s.bk, h, kk.data());
      std::vector<double> feats;
      Features(s, false, mem, kk, batch * m, feats);
      const std::size_t fw = c.heads * s.k;
      for (std::size_t r = 0; r < batch; ++r) {
        Tensor fk_t({m, fw}, std::vector<double>(feats.begin() + r * m * fw,
                                                 feats.begin() + (r + 1) * m * fw));
        Tensor v_t({m, h}, std::vector<double>(vv.begin() + r * m * h, vv.begin() + (r + 1) * m * h));
        L.cross_states.push_back(
            std::make_shared<const RecurrentState>(PrecomputeCrossState(fk_t, v_t, c.heads)));
      }
    }
    source_set = true;
  }

  std::span<const double> Step(std::span<const int> tokens) {
    if (tokens.size() != batch) {
      throw InputError("step needs one token per stream (" + std::to_string(batch) + "), got " +
                       std::to_string(tokens.size()));
    }
    if (c.seq2seq && !source_set) throw ContractError("seq2seq decode before SetSource");
    if (pos >= c.max_positions) {
      throw InputError("position " + std::to_string(pos) + " exceeds max_positions " +
                       std::to_string(c.max_positions));
    }
    x.resize(batch * h);
    for (std::size_t r = 0; r < batch; ++r) {
      const int t = tokens[r];
      if (t < 0 || static_cast<std::size_t>(t) >= c.vocab) {
        throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(c.vocab));
      }
      for (std::size_t j = 0; j < h; ++j) {
        x[r * h + j] = tok_emb[static_cast<std::size_t>(t) * h + j] + pos_emb[pos * h + j];
      }
    }
    for (Layer& L : layers) {
      Norm(x, L.ln_self_g, L.ln_self_b, a);
      SelfAttend(L);
      Residual(L.self);
      if (c.seq2seq) {
        Norm(x, L.ln_cross_g, L.ln_cross_b, a);
        CrossAttend(L);
        Residual(L.cross);
      }
      Norm(x, L.ln_ffn_g, L.ln_ffn_b, a);
      hidden.resize(batch * c.ffn_dim);
      Affine(a.data(), batch, h, L.w1, L.b1, c.ffn_dim, hidden.data());
      ReluInPlace(hidden);
      y.resize(batch * h);
      Affine(hidden.data(), batch, c.ffn_dim, L.w2, L.b2, h, y.data());
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
    }
    Norm(x, ln_g, ln_b, a);
    logits.assign(batch * c.vocab, 0.0);
    kernels::Gemm(false, true, batch, c.vocab, h, a.data(), out_w.data(), 0.0, logits.data());
    ++pos;
    return logits;
  }

  std::size_t StateElements() const {
    std::size_t n = 0;
    for (const Layer& L : layers) {
      for (const auto& s : L.states) n += s.ElementCount();
      for (const auto& kv : L.keys) n += kv.size();
      for (const auto& kv : L.values) n += kv.size();
      for (const auto& s : L.cross_states) n += s->ElementCount();
      for (const auto& kv : L.cross_keys) n += kv.size();
      for (const auto& kv : L.cross_values) n += kv.size();
    }
    return n;
  }
};

IncrementalDecoder::IncrementalDecoder(const Model& model, std::size_t batch)
    : impl_(std::make_unique<Impl>(model, batch)) {}
IncrementalDecoder::~IncrementalDecoder() = default;

void IncrementalDecoder::SetSource(std::span<const int> src) { impl_->SetSource(src); }
std::span<const double> IncrementalDecoder::Step(std::span<const int> tokens) {
  return impl_->Step(tokens);
}
std::size_t IncrementalDecoder::position() const { return impl_->pos; }
std::size_t IncrementalDecoder::batch() const { return impl_->batch; }
std::size_t IncrementalDecoder::AttentionStateElements() const { return impl_->StateElements(); }

const RecurrentState& IncrementalDecoder::CrossState(std::size_t layer, std::size_t stream) const {
  if (layer >= impl_->layers.size() || stream >= impl_->layers[layer].cross_states.size()) {
    throw ContractError("no linear cross state for layer " + std::to_string(layer) + ", stream " +
                        std::to_string(stream));
  }
  return *impl_->layers[layer].cross_states[stream];
}

std::size_t StateFootprint(const ModelConfig& config) {
  const std::size_t r = config.heads, d = config.head_dim;
  std::size_t n = 0;
  for (AttentionKind kind : config.causal_kinds) {
    if (IsLinear(kind)) n += r * config.k_causal * (d + 1);
  }
  for (AttentionKind kind : config.cross_kinds) {
    if (IsLinear(kind)) n += r * config.k_cross * (d + 1);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

int Argmax(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

void CheckSteps(int n_steps) {
  if (n_steps <= 0) throw ContractError("generation needs n_steps >= 1, got " + std::to_string(n_steps));
}

}  // namespace

std::vector<int> Generate(const Model& model, std::span<const int> prompt, int n_steps,
                          DecodeMode mode) {
  CheckSteps(n_steps);
  if (prompt.empty()) throw ContractError("generation needs a prompt of at least one token");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_steps));
  if (mode == DecodeMode::kRecurrent) {
    IncrementalDecoder dec(model, 1);
    std::span<const double> logits;
    for (int t : prompt) logits = dec.Step(std::span<const int>(&t, 1));
    for (int i = 0; i < n_steps; ++i) {
      const int next = Argmax(logits);
      out.push_back(next);
      if (i + 1 < n_steps) logits = dec.Step(std::span<const int>(&next, 1));
    }
    return out;
  }
  NoGradGuard guard;
  std::vector<int> seq(prompt.begin(), prompt.end());
  const std::size_t v = model.config().vocab;
  for (int i = 0; i < n_steps; ++i) {
    const Tensor logits = LmForward(model, seq, 1);
    const int next = Argmax(logits.data().subspan((seq.size() - 1) * v, v));
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

std::vector<int> GenerateSeq2Seq(const Model& model, std::span<const int> src, int bos,
                                 int n_steps, DecodeMode mode) {
  CheckSteps(n_steps);
  if (src.empty()) throw InputError("empty source sequence");
  std::vector<int> out;
  if (mode == DecodeMode::kRecurrent) {
    IncrementalDecoder dec(model, 1);
    dec.SetSource(src);
    auto logits = dec.Step(std::span<const int>(&bos, 1));
    for (int i = 0; i < n_steps; ++i) {
      const int next = Argmax(logits);
      out.push_back(next);
      if (i + 1 < n_steps) logits = dec.Step(std::span<const int>(&next, 1));
    }
    return out;
  }
  NoGradGuard guard;
  std::vector<int> tgt{bos};
  const std::size_t v = model.config().vocab;
  for (int i = 0; i < n_steps; ++i) {
    const Tensor logits = Seq2SeqForward(model, src, tgt, 1);
    const int next = Argmax(logits.data().subspan((tgt.size() - 1) * v, v));
    out.push_back(next);
    tgt.push_back(next);
  }
  return out;
}

}  // namespace t2r
