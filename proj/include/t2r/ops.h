#pragma once

// Differentiable operations over Tensor. Every op records itself on the
// thread's Tape when recording is on and some input requires grad.
//
// Broadcasting is limited to same-shape operands or a single-element operand
// against a tensor; anything else is a DimensionError.

#include <functional>
#include <span>

#include "t2r/random.h"
#include "t2r/tensor.h"

namespace t2r {

// a[m x n] * b[n x p].
Tensor MatMul(const Tensor& a, const Tensor& b);
// x[N x in] * w[out x in]^T + bias[out]; bias may be undefined.
Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& a, double factor);
Tensor AddConstant(const Tensor& a, double constant);

// relu'(0) is taken as 0.
Tensor Relu(const Tensor& x);
// elu(x) + 1: x + 1 for x >= 0, exp(x) otherwise. Strictly positive.
Tensor EluPlusOne(const Tensor& x);
Tensor Exp(const Tensor& x);
Tensor Reciprocal(const Tensor& x);

// Softmax over the last axis with max subtraction.
Tensor SoftmaxRows(const Tensor& x);
// Per-row layer norm over the last axis; gain and bias have the row width.
Tensor LayerNormRows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                     double eps = 1e-5);

// Gathers rows of table[V x h]; ids outside [0, V) are an InputError.
Tensor Embedding(const Tensor& table, std::span<const int> ids);

Tensor Sum(const Tensor& x);

// Label-smoothed cross-entropy averaged over rows whose target is not
// kIgnoreTarget. logits is [N x V].
inline constexpr int kIgnoreTarget = -1;
Tensor CrossEntropy(const Tensor& logits, std::span<const int> targets,
                    double label_smoothing = 0.0);

// Inverted dropout; identity when rate == 0.
Tensor Dropout(const Tensor& x, double rate, Rng& rng);

// Block-diagonal affine map applied head by head:
// x[N x (r*d)], w[r x k x d], bias[r x k] (may be undefined) -> [N x (r*k)].
Tensor HeadLinear(const Tensor& x, const Tensor& w, const Tensor& bias);
// Rescales every head slice of x[N x (r*d)] to Euclidean norm target_norm.
Tensor HeadNormalize(const Tensor& x, std::size_t heads, double target_norm);

// Central finite-difference gradient of a scalar function at x.
Tensor FiniteDiffGrad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                      double eps);

}  // namespace t2r
