#include "t2r/attention.h"

#include <algorithm>
#include <cmath>

#include "kernels.h"
#include "t2r/errors.h"
#include "t2r/ops.h"

namespace t2r {

using internal::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::string_view FeatureMapName(FeatureMapKind kind) {
  switch (kind) {
    case FeatureMapKind::kMlpRelu:
      return "mlp";
    case FeatureMapKind::kElu:
      return "elu";
    case FeatureMapKind::kRfa:
      return "rfa";
  }
  return "?";
}

FeatureMapKind ParseFeatureMap(std::string_view name) {
  if (name == "mlp" || name == "mlp-relu") return FeatureMapKind::kMlpRelu;
  if (name == "elu") return FeatureMapKind::kElu;
  if (name == "rfa") return FeatureMapKind::kRfa;
  throw ConfigError("unknown feature map '" + std::string(name) + "' (expected mlp, elu or rfa)");
}

std::string_view AttentionSiteName(AttentionSite site) {
  switch (site) {
    case AttentionSite::kSelf:
      return "self";
    case AttentionSite::kCross:
      return "cross";
    case AttentionSite::kEncoder:
      return "encoder";
  }
  return "?";
}

std::size_t FeatureMap::LearnableParameterCount() const {
  switch (kind) {
    case FeatureMapKind::kMlpRelu:
      return weight.numel() + bias.numel();
    case FeatureMapKind::kElu:
      return 0;
    case FeatureMapKind::kRfa:
      return sigma.numel();
  }
  return 0;
}

FeatureMap MakeFeatureMap(FeatureMapKind kind, std::size_t heads, std::size_t head_dim,
                          std::size_t feature_size, Rng& rng) {
  if (heads == 0 || head_dim == 0 || feature_size == 0) {
    throw ConfigError("feature map needs heads, head_dim and feature size >= 1");
  }
  FeatureMap phi;
  phi.kind = kind;
  phi.heads = heads;
  phi.head_dim = head_dim;
  phi.feature_size = feature_size;
  const std::size_t n = heads * feature_size * head_dim;
  switch (kind) {
    case FeatureMapKind::kMlpRelu: {
      std::vector<double> w(n);
      const double stddev = 1.0 / std::sqrt(static_cast<double>(head_dim));
      for (double& x : w) x = rng.Normal(0.0, stddev);
      phi.weight = Tensor({heads, feature_size, head_dim}, std::move(w), true);
      phi.bias = Tensor::Zeros({heads, feature_size}, true);
      break;
    }
    case FeatureMapKind::kElu:
      if (feature_size != head_dim) {
        throw ConfigError("elu feature map keeps the head dimension: feature size " +
                          std::to_string(feature_size) + " != head dim " +
                          std::to_string(head_dim));
      }
      break;
    case FeatureMapKind::kRfa: {
      std::vector<double> w(n);
      for (double& x : w) x = rng.Normal();
      phi.weight = Tensor({heads, feature_size, head_dim}, std::move(w), false);
      phi.sigma = Tensor::Scalar(std::pow(static_cast<double>(head_dim), 0.25), true);
      break;
    }
  }
  return phi;
}

Tensor ApplyFeatureMap(const FeatureMap& phi, const Tensor& x) {
  if (x.rank() != 2 || x.size(1) != phi.heads * phi.head_dim) {
    throw DimensionError("feature map expects rows of width " +
                         std::to_string(phi.heads * phi.head_dim) + ", got " +
                         ShapeToString(x.shape()));
  }
  switch (phi.kind) {
    case FeatureMapKind::kMlpRelu:
      return Relu(HeadLinear(x, phi.weight, phi.bias));
    case FeatureMapKind::kElu:
      if (phi.feature_size != phi.head_dim) {
        throw ConfigError("elu feature map requires feature size == head dim");
      }
      return EluPlusOne(x);
    case FeatureMapKind::kRfa: {
      const double d = static_cast<double>(phi.head_dim);
      const Tensor scaled = HeadNormalize(x, phi.heads, std::sqrt(d));
      const Tensor proj = HeadLinear(scaled, phi.weight, Tensor());
      const Tensor inv_sigma = Reciprocal(phi.sigma);
      const Tensor offset = Scale(Mul(inv_sigma, inv_sigma), 0.5 * d);
      const Tensor features = Exp(Sub(Mul(proj, inv_sigma), offset));
      return Scale(features, 1.0 / std::sqrt(static_cast<double>(phi.feature_size)));
    }
  }
  throw ConfigError("unhandled feature map");
}

void ApplyFeatureMapRow(const FeatureMap& phi, std::span<const double> x, std::span<double> out) {
  const std::size_t r = phi.heads, d = phi.head_dim, k = phi.feature_size;
  if (x.size() != r * d || out.size() != r * k) {
    throw DimensionError("feature map row: expected " + std::to_string(r * d) + " -> " +
                         std::to_string(r * k) + " entries");
  }
  switch (phi.kind) {
    case FeatureMapKind::kMlpRelu:
      for (std::size_t h = 0; h < r; ++h) {
        kernels::MatVec(phi.weight.data().subspan(h * k * d, k * d), k, d, x.subspan(h * d, d),
                        phi.bias.data().subspan(h * k, k), out.subspan(h * k, k));
      }
      for (double& v : out) v = std::max(v, 0.0);
      return;
    case FeatureMapKind::kElu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0.0 ? x[i] + 1.0 : std::exp(x[i]);
      return;
    case FeatureMapKind::kRfa: {
      const double sigma = phi.sigma.item();
      const double offset = 0.5 * static_cast<double>(d) / (sigma * sigma);
      const double scale = 1.0 / std::sqrt(static_cast<double>(k));
      std::vector<double> xs(d);
      for (std::size_t h = 0; h < r; ++h) {
        const double* xh = x.data() + h * d;
        const double norm = std::max(std::sqrt(kernels::Dot(xh, xh, d)), 1e-12);
        for (std::size_t c = 0; c < d; ++c) xs[c] = xh[c] * std::sqrt(static_cast<double>(d)) / norm;
        const double* w = phi.weight.data().data() + h * k * d;
        for (std::size_t l = 0; l < k; ++l) {
          out[h * k + l] = scale * std::exp(kernels::Dot(w + l * d, xs.data(), d) / sigma - offset);
        }
      }
      return;
    }
  }
}

void AttentionWeights::Validate() const {
  const std::size_t h = model_dim();
  if (heads == 0 || head_dim == 0) throw ConfigError("attention needs heads >= 1 and head_dim >= 1");
  auto check = [&](const Tensor& t, const Shape& want, const char* name) {
    if (!t.defined() || t.shape() != want) {
      throw DimensionError(std::string("attention weight ") + name + " should be " +
                           ShapeToString(want) + ", got " + ShapeToString(t.shape()));
    }
  };
  check(wq, {h, h}, "wq");
  check(wk, {h, h}, "wk");
  check(wv, {h, h}, "wv");
  check(wo, {h, h}, "wo");
  check(bq, {h}, "bq");
  check(bk, {h}, "bk");
  check(bv, {h}, "bv");
  check(bo, {h}, "bo");
}

AttentionWeights AttentionWeights::Init(std::size_t heads, std::size_t head_dim, Rng& rng) {
  AttentionWeights w;
  w.heads = heads;
  w.head_dim = head_dim;
  const std::size_t h = heads * head_dim;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(h));
  auto matrix = [&] {
    std::vector<double> v(h * h);
    for (double& x : v) x = rng.Normal(0.0, stddev);
    return Tensor({h, h}, std::move(v), true);
  };
  w.wq = matrix();
  w.wk = matrix();
  w.wv = matrix();
  w.wo = matrix();
  w.bq = Tensor::Zeros({h}, true);
  w.bk = Tensor::Zeros({h}, true);
  w.bv = Tensor::Zeros({h}, true);
  w.bo = Tensor::Zeros({h}, true);
  return w;
}

Projections ProjectQkv(const Tensor& x_tgt, const Tensor& x_src, const AttentionWeights& w) {
  const std::size_t h = w.model_dim();
  if (x_tgt.rank() != 2 || x_tgt.size(1) != h || x_src.rank() != 2 || x_src.size(1) != h) {
    throw DimensionError("project_qkv: inputs " + ShapeToString(x_tgt.shape()) + " / " +
                         ShapeToString(x_src.shape()) + " do not have model width " +
                         std::to_string(h));
  }
  return {Linear(x_tgt, w.wq, w.bq), Linear(x_src, w.wk, w.bk), Linear(x_src, w.wv, w.bv)};
}

namespace {

struct HeadGeometry {
  std::size_t batch, tgt_len, src_len, heads, qk_dim, v_dim;
  std::size_t qk_width() const { return heads * qk_dim; }
  std::size_t v_width() const { return heads * v_dim; }
};

HeadGeometry CheckAttentionShapes(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const AttentionShape& shape, const char* op) {
  if (shape.heads == 0) throw ContractError(std::string(op) + ": heads must be >= 1");
  if (shape.causal && shape.tgt_len != shape.src_len) {
    throw ContractError(std::string(op) + ": causal attention needs equal target and source " +
                        "lengths, got " + std::to_string(shape.tgt_len) + " and " +
                        std::to_string(shape.src_len));
  }
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError(std::string(op) + ": operands must be matrices");
  }
  if (q.size(0) != shape.batch * shape.tgt_len || k.size(0) != shape.batch * shape.src_len ||
      v.size(0) != shape.batch * shape.src_len) {
    throw DimensionError(std::string(op) + ": row counts " + ShapeToString(q.shape()) + ", " +
                         ShapeToString(k.shape()) + ", " + ShapeToString(v.shape()) +
                         " do not match batch " + std::to_string(shape.batch) + " x lengths " +
                         std::to_string(shape.tgt_len) + "/" + std::to_string(shape.src_len));
  }
  if (q.size(1) != k.size(1) || q.size(1) % shape.heads != 0 || v.size(1) % shape.heads != 0) {
    throw DimensionError(std::string(op) + ": head widths " + ShapeToString(q.shape()) + ", " +
                         ShapeToString(k.shape()) + ", " + ShapeToString(v.shape()) +
                         " incompatible with " + std::to_string(shape.heads) + " heads");
  }
  return {shape.batch, shape.tgt_len, shape.src_len, shape.heads, q.size(1) / shape.heads,
          v.size(1) / shape.heads};
}

HeadTrace* BeginTrace(TraceSink sink, const HeadGeometry& g, std::size_t head) {
  if (sink.trace == nullptr) return nullptr;
  HeadTrace t;
  t.layer = sink.layer;
  t.head = head;
  t.site = sink.site;
  t.rows = g.tgt_len;
  t.cols = g.src_len;
  t.weights.assign(g.tgt_len * g.src_len, 0.0);
  sink.trace->heads.push_back(std::move(t));
  return &sink.trace->heads.back();
}

}  // namespace

Tensor SoftmaxAttention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionShape& shape, TraceSink sink) {
  const HeadGeometry g = CheckAttentionShapes(q, k, v, shape, "softmax_attention");
  if (sink.trace != nullptr && g.batch != 1) {
    throw ContractError("softmax_attention: tracing requires batch == 1");
  }
  const std::size_t n = g.tgt_len, m = g.src_len, d = g.qk_dim, dv = g.v_dim;
  const std::size_t qw = g.qk_width(), vw = g.v_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  // probs[b][h] is an n x m block.
  std::vector<double> probs(g.batch * g.heads * n * m, 0.0);
  std::vector<double> out(g.batch * n * vw, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t h = 0; h < g.heads; ++h) {
      double* p = probs.data() + (b * g.heads + h) * n * m;
      const double* qb = qd + b * n * qw + h * d;
      const double* kb = kd + b * m * qw + h * d;
      const double* vb = vd + b * m * vw + h * dv;
      kernels::GemmStrided(false, true, n, m, d, scale, qb, qw, kb, qw, 0.0, p, m);
      for (std::size_t i = 0; i < n; ++i) {
        double* row = p + i * m;
        const std::size_t visible = shape.causal ? i + 1 : m;
        const double mx = *std::max_element(row, row + visible);
        double total = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        for (std::size_t j = 0; j < visible; ++j) row[j] /= total;
        for (std::size_t j = visible; j < m; ++j) row[j] = 0.0;
      }
      kernels::GemmStrided(false, false, n, dv, m, 1.0, p, m, vb, vw, 0.0,
                           out.data() + b * n * vw + h * dv, vw);
      if (HeadTrace* t = BeginTrace(sink, g, h)) std::copy(p, p + n * m, t->weights.begin());
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {g.batch * n, vw};
  impl->data = std::move(out);
  if (Tape::Current().recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    ImplPtr pq = q.impl(), pk = k.impl(), pv = v.impl();
    Tape::Current().Record(impl, [pq, pk, pv, g, scale, probs = std::move(probs)](TensorImpl& o) {
      const std::size_t n = g.tgt_len, m = g.src_len, d = g.qk_dim, dv = g.v_dim;
      const std::size_t qw = g.qk_width(), vw = g.v_width();
      double* gq = pq->requires_grad ? pq->EnsureGrad().data() : nullptr;
      double* gk = pk->requires_grad ? pk->EnsureGrad().data() : nullptr;
      double* gv = pv->requires_grad ? pv->EnsureGrad().data() : nullptr;
      std::vector<double> dp(n * m);
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t h = 0; h < g.heads; ++h) {
          const double* p = probs.data() + (b * g.heads + h) * n * m;
          const double* go = o.grad.data() + b * n * vw + h * dv;
          const double* vb = pv->data.data() + b * m * vw + h * dv;
          if (gv) {
            kernels::GemmStrided(true, false, m, dv, n, 1.0, p, m, go, vw, 1.0,
                                 gv + b * m * vw + h * dv, vw);
          }
          if (!gq && !gk) continue;
          // dP = dO V^T, then dS = P o (dP - rowsum(dP o P)).
          kernels::GemmStrided(false, true, n, m, dv, 1.0, go, vw, vb, vw, 0.0, dp.data(), m);
          for (std::size_t i = 0; i < n; ++i) {
            const double inner = kernels::Dot(p + i * m, dp.data() + i * m, m);
            for (std::size_t j = 0; j < m; ++j) dp[i * m + j] = p[i * m + j] * (dp[i * m + j] - inner);
          }
          const double* qb = pq->data.data() + b * n * qw + h * d;
          const double* kb = pk->data.data() + b * m * qw + h * d;
          if (gq) {
            kernels::GemmStrided(false, false, n, d, m, scale, dp.data(), m, kb, qw, 1.0,
                                 gq + b * n * qw + h * d, qw);
          }
          if (gk) {
            kernels::GemmStrided(true, false, m, d, n, scale, dp.data(), m, qb, qw, 1.0,
                                 gk + b * m * qw + h * d, qw);
          }
        }
      }
    });
  }
  return Tensor(impl);
}

Tensor LinearAttention(const Tensor& phi_q, const Tensor& phi_k, const Tensor& v,
                       const AttentionShape& shape, TraceSink sink) {
  const HeadGeometry g = CheckAttentionShapes(phi_q, phi_k, v, shape, "linear_attention");
  if (sink.trace != nullptr && g.batch != 1) {
    throw ContractError("linear_attention: tracing requires batch == 1");
  }
  const std::size_t n = g.tgt_len, m = g.src_len, fk = g.qk_dim, dv = g.v_dim;
  const std::size_t fw = g.qk_width(), vw = g.v_width();
  const bool causal = shape.causal;
  std::vector<double> out(g.batch * n * vw, 0.0);
  const double* qd = phi_q.data().data();
  const double* kd = phi_k.data().data();
  const double* vd = v.data().data();
  std::vector<double> state(fk * dv), norm(fk);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t h = 0; h < g.heads; ++h) {
      std::fill(state.begin(), state.end(), 0.0);
      std::fill(norm.begin(), norm.end(), 0.0);
      auto absorb = [&](std::size_t j) {
        const double* fkj = kd + (b * m + j) * fw + h * fk;
        const double* vj = vd + (b * m + j) * vw + h * dv;
        for (std::size_t a = 0; a < fk; ++a) {
          norm[a] += fkj[a];
          for (std::size_t c = 0; c < dv; ++c) state[a * dv + c] += fkj[a] * vj[c];
        }
      };
      if (!causal) {
        for (std::size_t j = 0; j < m; ++j) absorb(j);
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (causal) absorb(i);
        const double* fqi = qd + (b * n + i) * fw + h * fk;
        double* oi = out.data() + (b * n + i) * vw + h * dv;
        const double denom = std::max(kernels::Dot(fqi, norm.data(), fk), kDenominatorEps);
        for (std::size_t a = 0; a < fk; ++a) {
          if (fqi[a] == 0.0) continue;
          for (std::size_t c = 0; c < dv; ++c) oi[c] += fqi[a] * state[a * dv + c];
        }
        for (std::size_t c = 0; c < dv; ++c) oi[c] /= denom;
      }
      if (HeadTrace* t = BeginTrace(sink, g, h)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* fqi = qd + i * fw + h * fk;
          const std::size_t visible = causal ? i + 1 : m;
          double row_total = 0.0;
          for (std::size_t j = 0; j < visible; ++j) {
            t->weights[i * m + j] = kernels::Dot(fqi, kd + j * fw + h * fk, fk);
            row_total += t->weights[i * m + j];
          }
          const double row_denom = std::max(row_total, kDenominatorEps);
          for (std::size_t j = 0; j < visible; ++j) t->weights[i * m + j] /= row_denom;
        }
      }
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {g.batch * n, vw};
  impl->data = std::move(out);
  if (Tape::Current().recording() &&
      (phi_q.requires_grad() || phi_k.requires_grad() || v.requires_grad())) {
    ImplPtr pq = phi_q.impl(), pk = phi_k.impl(), pv = v.impl();
    Tape::Current().Record(impl, [pq, pk, pv, g, causal](TensorImpl& o) {
      const std::size_t n = g.tgt_len, m = g.src_len, fk = g.qk_dim, dv = g.v_dim;
      const std::size_t fw = g.qk_width(), vw = g.v_width();
      double* gq = pq->requires_grad ? pq->EnsureGrad().data() : nullptr;
      double* gk = pk->requires_grad ? pk->EnsureGrad().data() : nullptr;
      double* gv = pv->requires_grad ? pv->EnsureGrad().data() : nullptr;
      const double* qd = pq->data.data();
      const double* kd = pk->data.data();
      const double* vd = pv->data.data();
      std::vector<double> state(fk * dv), norm(fk);
      std::vector<double> dnum(n * dv), dden(n);
      std::vector<double> rstate(fk * dv), rnorm(fk);
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t h = 0; h < g.heads; ++h) {
          std::fill(state.begin(), state.end(), 0.0);
          std::fill(norm.begin(), norm.end(), 0.0);
          auto absorb = [&](std::size_t j) {
            const double* fkj = kd + (b * m + j) * fw + h * fk;
            const double* vj = vd + (b * m + j) * vw + h * dv;
            for (std::size_t a = 0; a < fk; ++a) {
              norm[a] += fkj[a];
              for (std::size_t c = 0; c < dv; ++c) state[a * dv + c] += fkj[a] * vj[c];
            }
          };
          if (!causal) {
            for (std::size_t j = 0; j < m; ++j) absorb(j);
          }
          // Forward sweep: rebuild S_i, z_i and push gradients into phi_q.
          for (std::size_t i = 0; i < n; ++i) {
            if (causal) absorb(i);
            const double* fqi = qd + (b * n + i) * fw + h * fk;
            const double* goi = o.grad.data() + (b * n + i) * vw + h * dv;
            const double* oi = o.data.data() + (b * n + i) * vw + h * dv;
            const double den = kernels::Dot(fqi, norm.data(), fk);
            const double guarded = std::max(den, kDenominatorEps);
            double* dn = dnum.data() + i * dv;
            for (std::size_t c = 0; c < dv; ++c) dn[c] = goi[c] / guarded;
            dden[i] = den > kDenominatorEps ? -kernels::Dot(goi, oi, dv) / guarded : 0.0;
            if (gq) {
              double* gqi = gq + (b * n + i) * fw + h * fk;
              for (std::size_t a = 0; a < fk; ++a) {
                gqi[a] += kernels::Dot(state.data() + a * dv, dn, dv) + dden[i] * norm[a];
              }
            }
          }
          if (!gk && !gv) continue;
          // Reverse sweep: R_j = sum_{i >= j} phi_q_i dnum_i^T, r_j likewise.
          std::fill(rstate.begin(), rstate.end(), 0.0);
          std::fill(rnorm.begin(), rnorm.end(), 0.0);
          auto emit = [&](std::size_t i) {
            const double* fqi = qd + (b * n + i) * fw + h * fk;
            const double* dn = dnum.data() + i * dv;
            for (std::size_t a = 0; a < fk; ++a) {
              rnorm[a] += dden[i] * fqi[a];
              if (fqi[a] == 0.0) continue;
              for (std::size_t c = 0; c < dv; ++c) rstate[a * dv + c] += fqi[a] * dn[c];
            }
          };
          if (!causal) {
            for (std::size_t i = 0; i < n; ++i) emit(i);
          }
          for (std::size_t jj = m; jj-- > 0;) {
            if (causal) emit(jj);
            const double* fkj = kd + (b * m + jj) * fw + h * fk;
            const double* vj = vd + (b * m + jj) * vw + h * dv;
            if (gk) {
              double* gkj = gk + (b * m + jj) * fw + h * fk;
              for (std::size_t a = 0; a < fk; ++a) {
                gkj[a] += kernels::Dot(rstate.data() + a * dv, vj, dv) + rnorm[a];
              }
            }
            if (gv) {
              double* gvj = gv + (b * m + jj) * vw + h * dv;
              for (std::size_t a = 0; a < fk; ++a) {
                if (fkj[a] == 0.0) continue;
                for (std::size_t c = 0; c < dv; ++c) gvj[c] += rstate[a * dv + c] * fkj[a];
              }
            }
          }
        }
      }
    });
  }
  return Tensor(impl);
}

Tensor MultiheadAttention(const Tensor& x_tgt, const Tensor& x_src, const AttentionWeights& w,
                          const FeatureMap* phi, const AttentionShape& shape, TraceSink sink) {
  if (shape.heads != w.heads) {
    throw ContractError("multihead_attention: shape heads " + std::to_string(shape.heads) +
                        " != weight heads " + std::to_string(w.heads));
  }
  const Projections p = ProjectQkv(x_tgt, x_src, w);
  Tensor mixed;
  if (phi == nullptr) {
    mixed = SoftmaxAttention(p.q, p.k, p.v, shape, sink);
  } else {
    mixed = LinearAttention(ApplyFeatureMap(*phi, p.q), ApplyFeatureMap(*phi, p.k), p.v, shape,
                            sink);
  }
  return Linear(mixed, w.wo, w.bo);
}

}  // namespace t2r
