#include "kernels.h"

#include <cblas.h>

#include <cmath>

extern "C" void openblas_set_num_threads(int num_threads);

namespace t2r::kernels {
namespace {

// Single-threaded BLAS keeps results bit-reproducible and benchmarks honest.
const bool kBlasPinned = [] {
  openblas_set_num_threads(1);
  return true;
}();

}  // namespace

void Gemm(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double beta, double* c) {
  (void)kBlasPinned;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
    return;
  }
  const auto lda = static_cast<int>(transpose_a ? m : k);
  const auto ldb = static_cast<int>(transpose_b ? k : n);
  cblas_dgemm(CblasRowMajor, transpose_a ? CblasTrans : CblasNoTrans,
              transpose_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

void GemmStrided(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n, std::size_t k,
                 double alpha, const double* a, std::size_t lda, const double* b,
                 std::size_t ldb, double beta, double* c, std::size_t ldc) {
  (void)kBlasPinned;
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, transpose_a ? CblasTrans : CblasNoTrans,
              transpose_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

void MatVec(std::span<const double> w, std::size_t rows, std::size_t cols,
            std::span<const double> x, std::span<const double> bias, std::span<double> y) {
  if (bias.empty()) {
    for (std::size_t r = 0; r < rows; ++r) y[r] = 0.0;
  } else {
    for (std::size_t r = 0; r < rows; ++r) y[r] = bias[r];
  }
  cblas_dgemv(CblasRowMajor, CblasNoTrans, static_cast<int>(rows), static_cast<int>(cols), 1.0,
              w.data(), static_cast<int>(cols), x.data(), 1, 1.0, y.data(), 1);
}

double Dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void LayerNorm(std::span<const double> x, std::span<const double> gain,
               std::span<const double> bias, double eps, std::span<double> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
}

}  // namespace t2r::kernels
