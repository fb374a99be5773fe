// SPDX-License-Identifier: Apache-2.0
// The OpenMP kernels against their serial references.
#include <omp.h>

#include "doctest.h"
#include "mtldr/kernels.hpp"
#include "test_util.hpp"

using namespace mtldr;
using mtldr::testing::max_abs_diff;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

struct ThreadCount {
  explicit ThreadCount(int n) : saved(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~ThreadCount() { omp_set_num_threads(saved); }
  int saved;
};

}  // namespace

TEST_CASE("gemm variants match the serial reference") {
  Rng rng(21);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 48, 300}, {5, 260, 513}}) {
    const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng), bt = random_vec(n * k, rng),
               at = random_vec(k * m, rng);
    std::vector<double> c1(m * n), c2(m * n);
    kernels::gemm_nn(a, b, c1, m, k, n);
    kernels::serial::gemm_nn(a, b, c2, m, k, n);
    CHECK(max_abs_diff(c1, c2) < 1e-12);
    kernels::gemm_nt(a, bt, c1, m, k, n);
    kernels::serial::gemm_nt(a, bt, c2, m, k, n);
    CHECK(max_abs_diff(c1, c2) < 1e-12);
    kernels::gemm_tn(at, b, c1, m, k, n);
    kernels::serial::gemm_tn(at, b, c2, m, k, n);
    CHECK(max_abs_diff(c1, c2) < 1e-12);
    // accumulate mode adds onto existing contents
    std::vector<double> acc1(m * n, 1.0), acc2(m * n, 1.0);
    kernels::gemm_nn(a, b, acc1, m, k, n, true);
    kernels::serial::gemm_nn(a, b, acc2, m, k, n, true);
    CHECK(max_abs_diff(acc1, acc2) < 1e-12);
  }
}

TEST_CASE("kron kernel matches serial reference exactly") {
  Rng rng(22);
  const auto p = random_vec(3 * 4, rng), q = random_vec(5 * 6, rng);
  std::vector<double> o1(3 * 4 * 5 * 6), o2(o1.size());
  kernels::kron(p, q, o1, 3, 4, 5, 6);
  kernels::serial::kron(p, q, o2, 3, 4, 5, 6);
  CHECK(o1 == o2);
}

TEST_CASE("hcl kernels match serial reference") {
  Rng rng(23);
  for (auto [rows, n, d_in, d_out] : {std::tuple{1, 1, 4, 4}, {3, 2, 8, 8}, {5, 4, 16, 64}, {7, 4, 64, 16}}) {
    const kernels::HclDims dims{static_cast<std::size_t>(rows), static_cast<std::size_t>(n),
                                static_cast<std::size_t>(d_in), static_cast<std::size_t>(d_out)};
    const auto x = random_vec(rows * d_in, rng), p = random_vec(n * n * n, rng),
               q = random_vec(n * dims.q_out() * dims.q_in(), rng), b = random_vec(d_out, rng),
               dy = random_vec(rows * d_out, rng);
    std::vector<double> y1(rows * d_out), y2(rows * d_out);
    kernels::hcl_forward(dims, x, p, q, b, y1);
    kernels::serial::hcl_forward(dims, x, p, q, b, y2);
    CHECK(max_abs_diff(y1, y2) < 1e-12);

    std::vector<double> dx1(x.size(), 0.5), dp1(p.size(), 0.5), dq1(q.size(), 0.5), db1(b.size(), 0.5);
    auto dx2 = dx1, dp2 = dp1, dq2 = dq1, db2 = db1;
    kernels::hcl_backward(dims, x, p, q, dy, dx1, dp1, dq1, db1);
    kernels::serial::hcl_backward(dims, x, p, q, dy, dx2, dp2, dq2, db2);
    CHECK(max_abs_diff(dx1, dx2) < 1e-12);
    CHECK(max_abs_diff(dp1, dp2) < 1e-12);
    CHECK(max_abs_diff(dq1, dq2) < 1e-12);
    CHECK(max_abs_diff(db1, db2) < 1e-12);
  }
}

TEST_CASE("kernel results do not depend on the thread count") {
  Rng rng(24);
  const std::size_t m = 70, k = 90, n = 130;
  const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
  const kernels::HclDims dims{40, 4, 64, 128};
  const auto x = random_vec(40 * 64, rng), p = random_vec(64, rng), q = random_vec(4 * 32 * 16, rng),
             bias = random_vec(128, rng), dy = random_vec(40 * 128, rng);
  auto run = [&] {
    std::vector<double> c(m * n), y(40 * 128), dx(x.size()), dp(p.size()), dq(q.size()), db(bias.size());
    kernels::gemm_nn(a, b, c, m, k, n);
    kernels::hcl_forward(dims, x, p, q, bias, y);
    kernels::hcl_backward(dims, x, p, q, dy, dx, dp, dq, db);
    c.insert(c.end(), y.begin(), y.end());
    c.insert(c.end(), dx.begin(), dx.end());
    c.insert(c.end(), dp.begin(), dp.end());
    c.insert(c.end(), dq.begin(), dq.end());
    return c;
  };
  std::vector<double> one, four;
  {
    ThreadCount tc(1);
    one = run();
  }
  {
    ThreadCount tc(4);
    four = run();
  }
  CHECK(one == four);
}
