// SPDX-License-Identifier: Apache-2.0
#include "mtldr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mtldr/rng.hpp"

namespace mtldr {

GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  const GradCheckOptions& opts) {
  if (opts.eps < 1e-7 || opts.eps > 1e-3) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");

  const double base = f().item();
  if (f().item() != base) throw std::runtime_error("grad_check: function is not deterministic");

  std::vector<bool> restore_flag;
  for (auto& p : params) {
    restore_flag.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    GradTape tape;
    GradTape::Scope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckResult result;
  Rng rng(opts.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor != 0 && coords.size() > opts.max_coords_per_tensor) {
      for (std::size_t i = 0; i < opts.max_coords_per_tensor; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(opts.max_coords_per_tensor);
    }
    auto values = p.mutable_data();
    for (std::size_t c : coords) {
      const double orig = values[c];
      values[c] = orig + opts.eps;
      const double fp = f().item();
      values[c] = orig - opts.eps;
      const double fm = f().item();
      values[c] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      if (opts.skip_kinks) {
        const double fwd = (fp - base) / opts.eps;
        const double bwd = (base - fm) / opts.eps;
        if (std::fabs(fwd - bwd) > opts.kink_tolerance * std::max(1.0, std::fabs(numeric))) {
          ++result.skipped_kinks;
          continue;
        }
      }
      const double err = std::fabs(analytic[pi][c] - numeric) / std::max(1.0, std::fabs(numeric));
      result.max_rel_err = std::max(result.max_rel_err, err);
      ++result.checked;
    }
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    params[pi].zero_grad();
    params[pi].set_requires_grad(restore_flag[pi]);
  }
  return result;
}

GradCheckResult grad_check_detailed(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                    const GradCheckOptions& opts) {
  Tensor leaf = x.clone();
  return grad_check_params([&] { return f(leaf); }, {leaf}, opts);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  GradCheckOptions opts;
  opts.eps = eps;
  return grad_check_detailed(f, x, opts).max_rel_err;
}

}  // namespace mtldr
