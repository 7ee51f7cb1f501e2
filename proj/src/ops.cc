#include "t2r/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.h"
#include "t2r/errors.h"

namespace t2r {

using internal::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

ImplPtr NewImpl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool ShouldRecord(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::Current().recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename F>
void Accumulate(const ImplPtr& t, F&& f) {
  if (t && t->requires_grad) f(t->EnsureGrad());
}

void RequireDefined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

void RequireMatrix(const Tensor& t, const char* op, const char* name) {
  RequireDefined(t, op);
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + name + " must be a matrix, got " +
                         ShapeToString(t.shape()));
  }
}

enum class Broadcast { kSame, kScalarLeft, kScalarRight };

Broadcast ResolveBroadcast(const Tensor& a, const Tensor& b, const char* op) {
  RequireDefined(a, op);
  RequireDefined(b, op);
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.numel() == 1) return Broadcast::kScalarLeft;
  if (b.numel() == 1) return Broadcast::kScalarRight;
  throw DimensionError(std::string(op) + ": incompatible shapes " + ShapeToString(a.shape()) +
                       " and " + ShapeToString(b.shape()));
}

// Shared skeleton for elementwise binary ops. da/db return the local partials
// d(out)/d(a), d(out)/d(b) at a single element.
template <typename Fwd, typename Da, typename Db>
Tensor BinaryOp(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
  const Broadcast mode = ResolveBroadcast(a, b, name);
  const Tensor& big = mode == Broadcast::kScalarLeft ? b : a;
  const std::size_t n = big.numel();
  const auto ad = a.data();
  const auto bd = b.data();
  auto ai = [&](std::size_t i) { return mode == Broadcast::kScalarLeft ? ad[0] : ad[i]; };
  auto bi = [&](std::size_t i) { return mode == Broadcast::kScalarRight ? bd[0] : bd[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai(i), bi(i));
  auto impl = NewImpl(big.shape(), std::move(out));
  if (ShouldRecord({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl();
    Tape::Current().Record(impl, [pa, pb, mode, da, db](TensorImpl& o) {
      const std::size_t n = o.data.size();
      auto av = [&](std::size_t i) { return mode == Broadcast::kScalarLeft ? pa->data[0] : pa->data[i]; };
      auto bv = [&](std::size_t i) { return mode == Broadcast::kScalarRight ? pb->data[0] : pb->data[i]; };
      Accumulate(pa, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < n; ++i) {
          g[mode == Broadcast::kScalarLeft ? 0 : i] += o.grad[i] * da(av(i), bv(i));
        }
      });
      Accumulate(pb, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < n; ++i) {
          g[mode == Broadcast::kScalarRight ? 0 : i] += o.grad[i] * db(av(i), bv(i));
        }
      });
    });
  }
  return Tensor(impl);
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor UnaryOp(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  RequireDefined(x, name);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto impl = NewImpl(x.shape(), std::move(out));
  if (ShouldRecord({&x})) {
    ImplPtr px = x.impl();
    Tape::Current().Record(impl, [px, deriv](TensorImpl& o) {
      Accumulate(px, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += o.grad[i] * deriv(px->data[i], o.data[i]);
        }
      });
    });
  }
  return Tensor(impl);
}

}  // namespace

Tensor MatMul(const Tensor& a, const Tensor& b) {
  RequireMatrix(a, "matmul", "a");
  RequireMatrix(b, "matmul", "b");
  const std::size_t m = a.size(0), n = a.size(1), p = b.size(1);
  if (b.size(0) != n) {
    throw DimensionError("matmul: inner dimensions differ for " + ShapeToString(a.shape()) +
                         " and " + ShapeToString(b.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  kernels::Gemm(false, false, m, p, n, a.data().data(), b.data().data(), 0.0, out.data());
  auto impl = NewImpl({m, p}, std::move(out));
  if (ShouldRecord({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl();
    Tape::Current().Record(impl, [pa, pb, m, n, p](TensorImpl& o) {
      // dA = dC B^T, dB = A^T dC
      Accumulate(pa, [&](std::vector<double>& g) {
        kernels::Gemm(false, true, m, n, p, o.grad.data(), pb->data.data(), 1.0, g.data());
      });
      Accumulate(pb, [&](std::vector<double>& g) {
        kernels::Gemm(true, false, n, p, m, pa->data.data(), o.grad.data(), 1.0, g.data());
      });
    });
  }
  return Tensor(impl);
}

Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  RequireMatrix(x, "linear", "x");
  RequireMatrix(w, "linear", "w");
  const std::size_t rows = x.size(0), in = x.size(1), out_dim = w.size(0);
  if (w.size(1) != in) {
    throw DimensionError("linear: input " + ShapeToString(x.shape()) + " does not match weight " +
                         ShapeToString(w.shape()));
  }
  if (bias.defined() && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + ShapeToString(bias.shape()) + " does not match weight " +
                         ShapeToString(w.shape()));
  }
  std::vector<double> out(rows * out_dim, 0.0);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * out_dim);
  }
  kernels::Gemm(false, true, rows, out_dim, in, x.data().data(), w.data().data(),
                bias.defined() ? 1.0 : 0.0, out.data());
  auto impl = NewImpl({rows, out_dim}, std::move(out));
  if (ShouldRecord({&x, &w, &bias})) {
    ImplPtr px = x.impl(), pw = w.impl(), pb = bias.impl();
    Tape::Current().Record(impl, [px, pw, pb, rows, in, out_dim](TensorImpl& o) {
      Accumulate(px, [&](std::vector<double>& g) {
        kernels::Gemm(false, false, rows, in, out_dim, o.grad.data(), pw->data.data(), 1.0, g.data());
      });
      Accumulate(pw, [&](std::vector<double>& g) {
        kernels::Gemm(true, false, out_dim, in, rows, o.grad.data(), px->data.data(), 1.0, g.data());
      });
      Accumulate(pb, [&](std::vector<double>& g) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < out_dim; ++c) g[c] += o.grad[r * out_dim + c];
        }
      });
    });
  }
  return Tensor(impl);
}

Tensor Add(const Tensor& a, const Tensor& b) {
  return BinaryOp(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  return BinaryOp(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  return BinaryOp(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor Scale(const Tensor& a, double factor) {
  return UnaryOp(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor AddConstant(const Tensor& a, double constant) {
  return UnaryOp(
      a, "add_constant", [constant](double x) { return x + constant; },
      [](double, double) { return 1.0; });
}

Tensor Relu(const Tensor& x) {
  return UnaryOp(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor EluPlusOne(const Tensor& x) {
  return UnaryOp(
      x, "elu_plus_one", [](double v) { return v >= 0.0 ? v + 1.0 : std::exp(v); },
      [](double v, double y) { return v >= 0.0 ? 1.0 : y; });
}

Tensor Exp(const Tensor& x) {
  return UnaryOp(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor Reciprocal(const Tensor& x) {
  return UnaryOp(
      x, "reciprocal", [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor SoftmaxRows(const Tensor& x) {
  RequireDefined(x, "softmax_rows");
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax_rows: empty last dimension in " + ShapeToString(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  auto impl = NewImpl(x.shape(), std::move(out));
  if (ShouldRecord({&x})) {
    ImplPtr px = x.impl();
    Tape::Current().Record(impl, [px, n, rows](TensorImpl& o) {
      Accumulate(px, [&](std::vector<double>& g) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = o.data.data() + r * n;
          const double* gy = o.grad.data() + r * n;
          const double inner = kernels::Dot(y, gy, n);
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - inner);
        }
      });
    });
  }
  return Tensor(impl);
}

Tensor LayerNormRows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  RequireDefined(x, "layer_norm");
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + ShapeToString(gain.shape()) + "/" +
                         ShapeToString(bias.shape()) + " do not match rows of " +
                         ShapeToString(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> out(x.numel());
  // Normalized activations and inverse std are kept for backward.
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gd[j] + bd[j];
    }
  }
  auto impl = NewImpl(x.shape(), std::move(out));
  if (ShouldRecord({&x, &gain, &bias})) {
    ImplPtr px = x.impl(), pg = gain.impl(), pb = bias.impl();
    Tape::Current().Record(impl, [px, pg, pb, n, rows, xhat = std::move(xhat),
                                  inv_std = std::move(inv_std)](TensorImpl& o) {
      Accumulate(pg, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < rows * n; ++i) g[i % n] += o.grad[i] * xhat[i];
      });
      Accumulate(pb, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < rows * n; ++i) g[i % n] += o.grad[i];
      });
      Accumulate(px, [&](std::vector<double>& g) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxhat = o.grad[r * n + j] * pg->data[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[r * n + j];
          }
          mean_dxhat *= inv_n;
          mean_dxhat_xhat *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxhat = o.grad[r * n + j] * pg->data[j];
            g[r * n + j] +=
                inv_std[r] * (dxhat - mean_dxhat - xhat[r * n + j] * mean_dxhat_xhat);
          }
        }
      });
    });
  }
  return Tensor(impl);
}

Tensor Embedding(const Tensor& table, std::span<const int> ids) {
  RequireMatrix(table, "embedding", "table");
  const std::size_t vocab = table.size(0), width = table.size(1);
  std::vector<int> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vocab) {
      throw InputError("token id " + std::to_string(rows[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  auto impl = NewImpl({rows.size(), width}, std::move(out));
  if (ShouldRecord({&table})) {
    ImplPtr pt = table.impl();
    Tape::Current().Record(impl, [pt, width, rows = std::move(rows)](TensorImpl& o) {
      Accumulate(pt, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
          for (std::size_t c = 0; c < width; ++c) {
            g[static_cast<std::size_t>(rows[i]) * width + c] += o.grad[i * width + c];
          }
        }
      });
    });
  }
  return Tensor(impl);
}

Tensor Sum(const Tensor& x) {
  RequireDefined(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  auto impl = NewImpl({}, {total});
  if (ShouldRecord({&x})) {
    ImplPtr px = x.impl();
    Tape::Current().Record(impl, [px](TensorImpl& o) {
      Accumulate(px, [&](std::vector<double>& g) {
        for (double& v : g) v += o.grad[0];
      });
    });
  }
  return Tensor(impl);
}

Tensor CrossEntropy(const Tensor& logits, std::span<const int> targets, double label_smoothing) {
  RequireMatrix(logits, "cross_entropy", "logits");
  const std::size_t rows = logits.size(0), vocab = logits.size(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + ShapeToString(logits.shape()));
  }
  const auto ld = logits.data();
  std::vector<double> probs(rows * vocab);
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t counted = 0;
  const double off = label_smoothing / static_cast<double>(vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = ld.data() + r * vocab;
    const double mx = *std::max_element(in, in + vocab);
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(in[v] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] = std::exp(in[v] - log_z);
    if (tgt[r] == kIgnoreTarget) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
      throw InputError("target id " + std::to_string(tgt[r]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    double sum_logp = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) sum_logp += in[v] - log_z;
    const double nll = -(in[tgt[r]] - log_z);
    total += (1.0 - label_smoothing) * nll - off * sum_logp;
    ++counted;
  }
  const double denom = counted ? static_cast<double>(counted) : 1.0;
  auto impl = NewImpl({}, {total / denom});
  if (ShouldRecord({&logits})) {
    ImplPtr pl = logits.impl();
    Tape::Current().Record(impl, [pl, rows, vocab, denom, label_smoothing, off,
                                  probs = std::move(probs), tgt = std::move(tgt)](TensorImpl& o) {
      Accumulate(pl, [&](std::vector<double>& g) {
        const double scale = o.grad[0] / denom;
        for (std::size_t r = 0; r < rows; ++r) {
          if (tgt[r] == kIgnoreTarget) continue;
          for (std::size_t v = 0; v < vocab; ++v) {
            double target_mass = off;
            if (static_cast<int>(v) == tgt[r]) target_mass += 1.0 - label_smoothing;
            g[r * vocab + v] += scale * (probs[r * vocab + v] - target_mass);
          }
        }
      });
    });
  }
  return Tensor(impl);
}

Tensor Dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  std::vector<double> mask(x.numel());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask) m = rng.Uniform() < rate ? 0.0 : keep_scale;
  return Mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor HeadLinear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  RequireMatrix(x, "head_linear", "x");
  RequireDefined(w, "head_linear");
  if (w.rank() != 3) {
    throw DimensionError("head_linear: weight must be [heads x out x in], got " +
                         ShapeToString(w.shape()));
  }
  const std::size_t rows = x.size(0), heads = w.size(0), out_dim = w.size(1), in = w.size(2);
  if (x.size(1) != heads * in) {
    throw DimensionError("head_linear: input " + ShapeToString(x.shape()) +
                         " does not match weight " + ShapeToString(w.shape()));
  }
  if (bias.defined() && bias.numel() != heads * out_dim) {
    throw DimensionError("head_linear: bias " + ShapeToString(bias.shape()) +
                         " does not match weight " + ShapeToString(w.shape()));
  }
  const std::size_t in_width = heads * in, out_width = heads * out_dim;
  std::vector<double> out(rows * out_width, 0.0);
  const auto xd = x.data();
  const auto wd = w.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* xv = xd.data() + r * in_width + h * in;
      for (std::size_t o = 0; o < out_dim; ++o) {
        double acc = bias.defined() ? bias.data()[h * out_dim + o] : 0.0;
        acc += kernels::Dot(wd.data() + (h * out_dim + o) * in, xv, in);
        out[r * out_width + h * out_dim + o] = acc;
      }
    }
  }
  auto impl = NewImpl({rows, out_width}, std::move(out));
  if (ShouldRecord({&x, &w, &bias})) {
    ImplPtr px = x.impl(), pw = w.impl(), pb = bias.impl();
    Tape::Current().Record(impl, [px, pw, pb, rows, heads, out_dim, in, in_width,
                                  out_width](TensorImpl& o) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t j = 0; j < out_dim; ++j) {
            const double go = o.grad[r * out_width + h * out_dim + j];
            if (go == 0.0) continue;
            const double* wrow = pw->data.data() + (h * out_dim + j) * in;
            const double* xv = px->data.data() + r * in_width + h * in;
            if (px->requires_grad) {
              double* gx = px->EnsureGrad().data() + r * in_width + h * in;
              for (std::size_t c = 0; c < in; ++c) gx[c] += go * wrow[c];
            }
            if (pw->requires_grad) {
              double* gw = pw->EnsureGrad().data() + (h * out_dim + j) * in;
              for (std::size_t c = 0; c < in; ++c) gw[c] += go * xv[c];
            }
            if (pb && pb->requires_grad) pb->EnsureGrad()[h * out_dim + j] += go;
          }
        }
      }
    });
  }
  return Tensor(impl);
}

Tensor HeadNormalize(const Tensor& x, std::size_t heads, double target_norm) {
  RequireMatrix(x, "head_normalize", "x");
  const std::size_t rows = x.size(0), width = x.size(1);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("head_normalize: width " + std::to_string(width) +
                         " not divisible into " + std::to_string(heads) + " heads");
  }
  const std::size_t dim = width / heads;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<double> norms(rows * heads);
  for (std::size_t s = 0; s < rows * heads; ++s) {
    const double* v = xd.data() + s * dim;
    norms[s] = std::max(std::sqrt(kernels::Dot(v, v, dim)), 1e-12);
    for (std::size_t c = 0; c < dim; ++c) out[s * dim + c] = v[c] * target_norm / norms[s];
  }
  auto impl = NewImpl(x.shape(), std::move(out));
  if (ShouldRecord({&x})) {
    ImplPtr px = x.impl();
    Tape::Current().Record(impl, [px, rows, heads, dim, target_norm,
                                  norms = std::move(norms)](TensorImpl& o) {
      Accumulate(px, [&](std::vector<double>& g) {
        // y = t x / |x|  =>  dx = t/|x| (dy - u (u . dy)), u = x / |x|
        for (std::size_t s = 0; s < rows * heads; ++s) {
          const double* v = px->data.data() + s * dim;
          const double* gy = o.grad.data() + s * dim;
          const double n = norms[s];
          const double u_dot_gy = kernels::Dot(v, gy, dim) / n;
          for (std::size_t c = 0; c < dim; ++c) {
            g[s * dim + c] += target_norm / n * (gy[c] - v[c] / n * u_dot_gy);
          }
        }
      });
    });
  }
  return Tensor(impl);
}

Tensor FiniteDiffGrad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                      double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
  NoGradGuard no_grad;
  Tensor probe = x.Clone();
  probe.set_requires_grad(false);
  std::vector<double> grad(x.numel());
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + eps;
    const double up = f(probe);
    values[i] = original - eps;
    const double down = f(probe);
    values[i] = original;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

}  // namespace t2r
