// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient oracle. Central differences per coordinate; the
// reported error for a coordinate is |analytic - numeric| / max(1, |numeric|).
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "mtldr/tensor.hpp"

namespace mtldr {

struct GradCheckOptions {
  double eps = 1e-6;
  // Coordinates sitting on a kink (e.g. relu at 0) have no derivative. When
  // enabled, a coordinate whose forward and backward one-sided slopes differ
  // by more than kink_tolerance * max(1, |central|) is skipped and counted.
  bool skip_kinks = false;
  double kink_tolerance = 0.1;
  // 0 checks every coordinate; otherwise a seeded subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 17;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

// f must rebuild its graph from the current values of `params` on each call.
GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  const GradCheckOptions& opts = {});

// Gradient of scalar f(x) with respect to x.
GradCheckResult grad_check_detailed(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                    const GradCheckOptions& opts = {});

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-6);

}  // namespace mtldr
