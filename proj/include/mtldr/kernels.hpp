// SPDX-License-Identifier: Apache-2.0
//
// Dense numeric kernels. Every kernel exists twice: an OpenMP version used by
// the tensor ops, and a plain serial version in `serial::` kept as the
// reference for tests and benchmarks.
//
// All matrices are row-major. The OpenMP versions only split work across
// independent output elements, so each element is accumulated in the same
// order regardless of the thread count.
#pragma once

#include <cstddef>
#include <span>

namespace mtldr::kernels {

// C[m x n] = A[m x k] * B[k x n]   (C += ... when accumulate)
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// C[m x n] = A[k x m]^T * B[k x n]
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// out[(i*c + k) * (b*d) + j*d + l] = p[i*b + j] * q[k*d + l]
void kron(std::span<const double> p, std::span<const double> q, std::span<double> out,
          std::size_t a, std::size_t b, std::size_t c, std::size_t d);

/// Shape of a sum-of-Kronecker linear layer: weight = sum_i P_i (x) Q_i with
/// P_i of size n x n and Q_i of size (d_out/n) x (d_in/n).
struct HclDims {
  std::size_t rows;   // T
  std::size_t n;      // component count
  std::size_t d_in;
  std::size_t d_out;
  std::size_t q_in() const { return d_in / n; }
  std::size_t q_out() const { return d_out / n; }
};

// y[T x d_out] = x * (sum_i P_i (x) Q_i)^T + bias, without materializing the
// weight. p holds n stacked n x n matrices, q holds n stacked q_out x q_in.
void hcl_forward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                 std::span<const double> q, std::span<const double> bias, std::span<double> y);

// Accumulates gradients for x, p, q and bias given dy. Any output span may be
// empty, in which case that gradient is skipped.
void hcl_backward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                  std::span<const double> q, std::span<const double> dy, std::span<double> dx,
                  std::span<double> dp, std::span<double> dq, std::span<double> dbias);

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void kron(std::span<const double> p, std::span<const double> q, std::span<double> out,
          std::size_t a, std::size_t b, std::size_t c, std::size_t d);
void hcl_forward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                 std::span<const double> q, std::span<const double> bias, std::span<double> y);
void hcl_backward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                  std::span<const double> q, std::span<const double> dy, std::span<double> dx,
                  std::span<double> dp, std::span<double> dq, std::span<double> dbias);

}  // namespace serial

/// Number of OpenMP threads the kernels will use (1 when built without OpenMP).
int max_threads();

}  // namespace mtldr::kernels
