// SPDX-License-Identifier: Apache-2.0
// Serial reference vs OpenMP kernels.
#include <benchmark/benchmark.h>

#include <vector>

#include "mtldr/kernels.hpp"
#include "mtldr/rng.hpp"

using namespace mtldr;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::gemm_nn(a, b, c, n, n, n);
    else
      kernels::serial::gemm_nn(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

template <bool Parallel>
void BM_hcl(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const kernels::HclDims dims{256, 4, d, d};
  const auto x = filled(256 * d, 3), p = filled(64, 4), q = filled(4 * dims.q_out() * dims.q_in(), 5),
             bias = filled(d, 6);
  std::vector<double> y(256 * d);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::hcl_forward(dims, x, p, q, bias, y);
    else
      kernels::serial::hcl_forward(dims, x, p, q, bias, y);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<true>)->Arg(128)->Arg(256);
BENCHMARK(BM_hcl<false>)->Arg(128)->Arg(512);
BENCHMARK(BM_hcl<true>)->Arg(128)->Arg(512);

BENCHMARK_MAIN();
