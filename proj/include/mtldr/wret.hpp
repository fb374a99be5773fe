// SPDX-License-Identifier: Apache-2.0
//
// Variational sequence encoder with a planar-flow transport of the latent, an
// MMD pull toward a standard normal prior, and a generator that reconstructs
// the pooled encoder state from the transported latent.
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "mtldr/nn.hpp"

namespace mtldr {

// z -> G(z), a d x d symmetric positive-definite matrix (row-major).
struct RiemannianMetric {
  std::size_t dim = 0;
  std::function<std::vector<double>(std::span<const double> z)> g;

  static RiemannianMetric identity(std::size_t dim);
  static RiemannianMetric diagonal(std::vector<double> diag);
};

// u^T G(z) v. Throws NumericError when G(z) is not symmetric positive-definite.
double riemannian_inner(std::span<const double> u, std::span<const double> v, const RiemannianMetric& metric,
                        std::span<const double> z);

// Lower-triangular factor of a symmetric matrix; throws NumericError if it is
// not positive-definite.
std::vector<double> cholesky(std::span<const double> a, std::size_t n);

// f(z) = z + u * tanh(w.z + b)
struct FlowLayer {
  Tensor u;  // [1 x d_z]
  Tensor w;  // [1 x d_z]
  Tensor b;  // [1]

  static FlowLayer make(std::size_t d_z, Rng& rng);
  static FlowLayer identity(std::size_t d_z);
  // Keeps w.u >= -1 + 1e-6 so every layer stays invertible.
  void enforce_invertibility();
};

struct FlowStack {
  std::vector<FlowLayer> layers;

  static FlowStack make(std::size_t d_z, std::size_t count, Rng& rng);
  void enforce_invertibility();
  void collect(ParamList& out, const std::string& prefix) const;
};

struct FlowOutput {
  Tensor z_prime;  // [m x d_z]
  Tensor log_det;  // [m x 1], summed over layers
};

// Rows of z are independent samples; layers applied first to last.
FlowOutput apply_flow(const FlowStack& stack, const Tensor& z);
// Inverse by per-layer bisection on the scalar tanh argument (no gradient).
Tensor invert_flow(const FlowStack& stack, const Tensor& z_prime);

// Biased V-statistic with k(a, b) = exp(-|a - b|^2).
Tensor mmd(const Tensor& samples_q, const Tensor& samples_p);
// 0.5 * sum(exp(logvar) + mean^2 - 1 - logvar) over every entry.
Tensor kld_gaussian(const Tensor& mean, const Tensor& logvar);

constexpr double kLogvarMin = -8.0;
constexpr double kLogvarMax = 8.0;

struct WretParams {
  std::size_t d = 512;
  std::size_t d_z = 64;
  DenseEncoderBlock encoder;
  Linear mean_head;    // d -> d_z
  Linear logvar_head;  // d -> d_z
  FlowStack flow;
  Linear gen_hidden;   // d_z -> d
  Linear gen_out;      // d -> d
  Linear out;          // d -> d, applied to encoder states + G(z')

  static WretParams make(std::size_t d, std::size_t heads, std::size_t d_z, std::size_t flows, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LatentState {
  Tensor mean;      // [m x d_z]
  Tensor logvar;    // [m x d_z], clamped
  Tensor z;         // [m x d_z]
  Tensor z_prime;   // [m x d_z]
  Tensor log_det;   // [m x 1]
};

// z = mean + exp(0.5 * logvar) * eps
Tensor reparameterize(const Tensor& mean, const Tensor& logvar, const Tensor& eps);

// Encoder states [T x d] of one sequence; key_is_pad masks padded keys.
Tensor wret_states(const WretParams& params, const Tensor& x_seq, const std::vector<bool>& key_is_pad = {});
// Mean over non-pad positions [1 x d].
Tensor wret_pool(const Tensor& states, const std::vector<bool>& key_is_pad = {});

// Posterior heads on pooled rows [m x d], sampling with eps [m x d_z], then the flow.
LatentState encode_posterior(const WretParams& params, const Tensor& pooled, const Tensor& eps);
// Convenience: states -> pool -> posterior for one sequence.
LatentState encode_posterior(const WretParams& params, const Tensor& x_seq, const std::vector<bool>& key_is_pad,
                             const Tensor& eps);

// Two-layer generator G(z') [m x d].
Tensor generate(const WretParams& params, const Tensor& z_prime);

// Per-position states conditioned on G(z') (broadcast-added), then the output layer.
Tensor wret_encode(const WretParams& params, const Tensor& states, const Tensor& generated);

struct WretLoss {
  Tensor rec;     // mean squared error between pooled rows and G(z')
  Tensor mmd;     // against prior draws; zero when fewer than two rows
  Tensor kld;     // mean over rows
  Tensor logdet;  // mean over rows
  Tensor total;   // rec + lambda * mmd + alpha * (kld - logdet)
};

WretLoss wret_objective(const Tensor& pooled, const LatentState& state, const Tensor& generated, double lambda,
                        double alpha, const Tensor& prior);

}  // namespace mtldr
