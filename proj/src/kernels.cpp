// SPDX-License-Identifier: Apache-2.0
#include "mtldr/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mtldr::kernels {
namespace {

using Index = std::int64_t;

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColTile = 256;

// Rows [row_begin, row_end) of C = A * B. Every C element accumulates over k in
// ascending order, matching the naive triple loop exactly.
void gemm_nn_rows(const double* a, const double* b, double* c, std::size_t row_begin,
                  std::size_t row_end, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
    std::fill(c + row_begin * n, c + row_end * n, 0.0);
  }
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t j1 = std::min(n, j0 + kColTile);
    std::size_t i = row_begin;
    for (; i + kRowBlock <= row_end; i += kRowBlock) {
      double* c0 = c + (i + 0) * n;
      double* c1 = c + (i + 1) * n;
      double* c2 = c + (i + 2) * n;
      double* c3 = c + (i + 3) * n;
      const double* a0 = a + (i + 0) * k;
      const double* a1 = a + (i + 1) * k;
      const double* a2 = a + (i + 2) * k;
      const double* a3 = a + (i + 3) * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* brow = b + kk * n;
        const double s0 = a0[kk], s1 = a1[kk], s2 = a2[kk], s3 = a3[kk];
        for (std::size_t j = j0; j < j1; ++j) {
          const double bv = brow[j];
          c0[j] += s0 * bv;
          c1[j] += s1 * bv;
          c2[j] += s2 * bv;
          c3[j] += s3 * bv;
        }
      }
    }
    for (; i < row_end; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* brow = b + kk * n;
        const double s = ai[kk];
        for (std::size_t j = j0; j < j1; ++j) ci[j] += s * brow[j];
      }
    }
  }
}

void gemm_nn_parallel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n, bool accumulate) {
  const Index blocks = static_cast<Index>((m + kRowBlock - 1) / kRowBlock);
  const bool go_parallel = m * k * n > 32768;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (Index blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t r1 = std::min(m, r0 + kRowBlock);
    gemm_nn_rows(a, b, c, r0, r1, k, n, accumulate);
  }
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  gemm_nn_parallel(a.data(), b.data(), c.data(), m, k, n, accumulate);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto bt = transposed(b.data(), n, k);  // k x n
  gemm_nn_parallel(a.data(), bt.data(), c.data(), m, k, n, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto at = transposed(a.data(), k, m);  // m x k
  gemm_nn_parallel(at.data(), b.data(), c.data(), m, k, n, accumulate);
}

void kron(std::span<const double> p, std::span<const double> q, std::span<double> out,
          std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
  const std::size_t out_cols = b * d;
#pragma omp parallel for schedule(static) if (a * b * c * d > 65536)
  for (Index i = 0; i < static_cast<Index>(a); ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      double* row = out.data() + (static_cast<std::size_t>(i) * c + k) * out_cols;
      for (std::size_t j = 0; j < b; ++j) {
        const double pv = p[static_cast<std::size_t>(i) * b + j];
        const double* qrow = q.data() + k * d;
        for (std::size_t l = 0; l < d; ++l) row[j * d + l] = pv * qrow[l];
      }
    }
  }
}

void hcl_forward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                 std::span<const double> q, std::span<const double> bias, std::span<double> y) {
  const std::size_t n = dims.n, qi = dims.q_in(), qo = dims.q_out(), rows = dims.rows;
  const std::size_t zrows = rows * n;
  for (std::size_t t = 0; t < rows; ++t)
    std::copy(bias.begin(), bias.end(), y.begin() + static_cast<std::ptrdiff_t>(t * dims.d_out));
  std::vector<double> z(zrows * qo);
  for (std::size_t i = 0; i < n; ++i) {
    // x viewed as (rows*n) x q_in, one row per input component.
    gemm_nt(x, q.subspan(i * qo * qi, qo * qi), z, zrows, qi, qo);
    const double* pi = p.data() + i * n * n;
#pragma omp parallel for schedule(static) if (rows * n * n * qo > 32768)
    for (Index t = 0; t < static_cast<Index>(rows); ++t) {
      double* yt = y.data() + static_cast<std::size_t>(t) * dims.d_out;
      const double* zt = z.data() + static_cast<std::size_t>(t) * n * qo;
      for (std::size_t r = 0; r < n; ++r) {
        double* yr = yt + r * qo;
        for (std::size_t c = 0; c < n; ++c) {
          const double pv = pi[r * n + c];
          const double* zc = zt + c * qo;
          for (std::size_t k = 0; k < qo; ++k) yr[k] += pv * zc[k];
        }
      }
    }
  }
}

void hcl_backward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                  std::span<const double> q, std::span<const double> dy, std::span<double> dx,
                  std::span<double> dp, std::span<double> dq, std::span<double> dbias) {
  const std::size_t n = dims.n, qi = dims.q_in(), qo = dims.q_out(), rows = dims.rows;
  const std::size_t zrows = rows * n;
  const bool need_z = !dp.empty();
  std::vector<double> z(need_z ? zrows * qo : 0);
  std::vector<double> dz(zrows * qo);
  for (std::size_t i = 0; i < n; ++i) {
    const double* pi = p.data() + i * n * n;
    const auto qmat = q.subspan(i * qo * qi, qo * qi);
    // dz[t, c, :] = sum_r P_i[r, c] dy[t, r, :]
#pragma omp parallel for schedule(static) if (rows * n * n * qo > 32768)
    for (Index t = 0; t < static_cast<Index>(rows); ++t) {
      const double* dyt = dy.data() + static_cast<std::size_t>(t) * dims.d_out;
      double* dzt = dz.data() + static_cast<std::size_t>(t) * n * qo;
      std::fill(dzt, dzt + n * qo, 0.0);
      for (std::size_t c = 0; c < n; ++c) {
        double* dzc = dzt + c * qo;
        for (std::size_t r = 0; r < n; ++r) {
          const double pv = pi[r * n + c];
          const double* dyr = dyt + r * qo;
          for (std::size_t k = 0; k < qo; ++k) dzc[k] += pv * dyr[k];
        }
      }
    }
    if (!dx.empty()) gemm_nn(dz, qmat, dx, zrows, qo, qi, /*accumulate=*/true);
    if (!dq.empty()) gemm_tn(dz, x, dq.subspan(i * qo * qi, qo * qi), qo, zrows, qi, true);
    if (need_z) {
      gemm_nt(x, qmat, z, zrows, qi, qo);
      double* dpi = dp.data() + i * n * n;
#pragma omp parallel for schedule(static) if (rows * n * n * qo > 32768)
      for (Index rc = 0; rc < static_cast<Index>(n * n); ++rc) {
        const std::size_t r = static_cast<std::size_t>(rc) / n, c = static_cast<std::size_t>(rc) % n;
        double acc = dpi[rc];
        for (std::size_t t = 0; t < rows; ++t) {
          const double* dyr = dy.data() + t * dims.d_out + r * qo;
          const double* zc = z.data() + (t * n + c) * qo;
          for (std::size_t k = 0; k < qo; ++k) acc += dyr[k] * zc[k];
        }
        dpi[rc] = acc;
      }
    }
  }
  if (!dbias.empty()) {
#pragma omp parallel for schedule(static) if (rows * dims.d_out > 65536)
    for (Index j = 0; j < static_cast<Index>(dims.d_out); ++j) {
      double acc = dbias[static_cast<std::size_t>(j)];
      for (std::size_t t = 0; t < rows; ++t) acc += dy[t * dims.d_out + static_cast<std::size_t>(j)];
      dbias[static_cast<std::size_t>(j)] = acc;
    }
  }
}

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = acc;
    }
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[j * k + kk];
      c[i * n + j] = acc;
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[kk * m + i] * b[kk * n + j];
      c[i * n + j] = acc;
    }
  }
}

void kron(std::span<const double> p, std::span<const double> q, std::span<double> out,
          std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t l = 0; l < d; ++l)
          out[(i * c + k) * (b * d) + j * d + l] = p[i * b + j] * q[k * d + l];
}

void hcl_forward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                 std::span<const double> q, std::span<const double> bias, std::span<double> y) {
  const std::size_t n = dims.n, qi = dims.q_in(), qo = dims.q_out();
  std::vector<double> z(n * qo);
  for (std::size_t t = 0; t < dims.rows; ++t) {
    double* yt = y.data() + t * dims.d_out;
    for (std::size_t j = 0; j < dims.d_out; ++j) yt[j] = bias[j];
    const double* xt = x.data() + t * dims.d_in;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t k = 0; k < qo; ++k) {
          double acc = 0.0;
          for (std::size_t l = 0; l < qi; ++l) acc += xt[c * qi + l] * q[(i * qo + k) * qi + l];
          z[c * qo + k] = acc;
        }
      }
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c)
          for (std::size_t k = 0; k < qo; ++k) yt[r * qo + k] += p[(i * n + r) * n + c] * z[c * qo + k];
    }
  }
}

void hcl_backward(const HclDims& dims, std::span<const double> x, std::span<const double> p,
                  std::span<const double> q, std::span<const double> dy, std::span<double> dx,
                  std::span<double> dp, std::span<double> dq, std::span<double> dbias) {
  const std::size_t n = dims.n, qi = dims.q_in(), qo = dims.q_out(), rows = dims.rows;
  // dz[i][t][c][k] and z[i][t][c][k]
  std::vector<double> dz(n * rows * n * qo, 0.0), z(n * rows * n * qo, 0.0);
  auto at = [&](std::size_t i, std::size_t t, std::size_t c, std::size_t k) {
    return ((i * rows + t) * n + c) * qo + k;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < qo; ++k) {
          double acc = 0.0;
          for (std::size_t r = 0; r < n; ++r) acc += p[(i * n + r) * n + c] * dy[t * dims.d_out + r * qo + k];
          dz[at(i, t, c, k)] = acc;
          double zacc = 0.0;
          for (std::size_t l = 0; l < qi; ++l) zacc += x[t * dims.d_in + c * qi + l] * q[(i * qo + k) * qi + l];
          z[at(i, t, c, k)] = zacc;
        }
  if (!dx.empty()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t c = 0; c < n; ++c)
          for (std::size_t l = 0; l < qi; ++l) {
            double acc = dx[t * dims.d_in + c * qi + l];
            for (std::size_t k = 0; k < qo; ++k) acc += dz[at(i, t, c, k)] * q[(i * qo + k) * qi + l];
            dx[t * dims.d_in + c * qi + l] = acc;
          }
  }
  if (!dq.empty()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < qo; ++k)
        for (std::size_t l = 0; l < qi; ++l) {
          double acc = dq[(i * qo + k) * qi + l];
          for (std::size_t t = 0; t < rows; ++t)
            for (std::size_t c = 0; c < n; ++c) acc += dz[at(i, t, c, k)] * x[t * dims.d_in + c * qi + l];
          dq[(i * qo + k) * qi + l] = acc;
        }
  }
  if (!dp.empty()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          double acc = dp[(i * n + r) * n + c];
          for (std::size_t t = 0; t < rows; ++t)
            for (std::size_t k = 0; k < qo; ++k) acc += dy[t * dims.d_out + r * qo + k] * z[at(i, t, c, k)];
          dp[(i * n + r) * n + c] = acc;
        }
  }
  if (!dbias.empty()) {
    for (std::size_t j = 0; j < dims.d_out; ++j) {
      double acc = dbias[j];
      for (std::size_t t = 0; t < rows; ++t) acc += dy[t * dims.d_out + j];
      dbias[j] = acc;
    }
  }
}

}  // namespace serial
}  // namespace mtldr::kernels
