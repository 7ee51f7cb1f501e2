#pragma once

// Raw dense kernels shared by the taped ops and the tape-free decoding path.
// Everything is row-major.

#include <cstddef>
#include <span>

namespace t2r::kernels {

// C[m x n] = op(A) * op(B) + beta * C, where op(A) is m x k and op(B) is k x n.
// When transpose_a, A is stored k x m; when transpose_b, B is stored n x k.
void Gemm(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double beta, double* c);

// Same as Gemm with explicit leading dimensions, for strided head slices.
void GemmStrided(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n, std::size_t k,
                 double alpha, const double* a, std::size_t lda, const double* b,
                 std::size_t ldb, double beta, double* c, std::size_t ldc);

// y = W x (+ bias), W stored rows x cols.
void MatVec(std::span<const double> w, std::size_t rows, std::size_t cols,
            std::span<const double> x, std::span<const double> bias, std::span<double> y);

double Dot(const double* a, const double* b, std::size_t n);

// Layer norm of one row with gain/bias, written to out.
void LayerNorm(std::span<const double> x, std::span<const double> gain,
               std::span<const double> bias, double eps, std::span<double> out);

}  // namespace t2r::kernels
