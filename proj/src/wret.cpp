// SPDX-License-Identifier: Apache-2.0
#include "mtldr/wret.hpp"

#include <algorithm>
#include <cmath>

namespace mtldr {

// ---- metric -------------------------------------------------------------------

RiemannianMetric RiemannianMetric::identity(std::size_t dim) {
  return {dim, [dim](std::span<const double>) {
            std::vector<double> g(dim * dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i) g[i * dim + i] = 1.0;
            return g;
          }};
}

RiemannianMetric RiemannianMetric::diagonal(std::vector<double> diag) {
  const std::size_t dim = diag.size();
  return {dim, [dim, diag = std::move(diag)](std::span<const double>) {
            std::vector<double> g(dim * dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i) g[i * dim + i] = diag[i];
            return g;
          }};
}

std::vector<double> cholesky(std::span<const double> a, std::size_t n) {
  if (a.size() != n * n) throw DimensionError("cholesky: expected an n x n matrix");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (a[i * n + j] != a[j * n + i]) throw NumericError("metric is not symmetric");
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
    if (!(diag > 0.0)) throw NumericError("metric is not positive-definite");
    l[j * n + j] = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / l[j * n + j];
    }
  }
  return l;
}

double riemannian_inner(std::span<const double> u, std::span<const double> v, const RiemannianMetric& metric,
                        std::span<const double> z) {
  const std::size_t n = metric.dim;
  if (u.size() != n || v.size() != n || z.size() != n) throw DimensionError("riemannian_inner: dimension mismatch");
  const auto g = metric.g(z);
  cholesky(g, n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += g[i * n + j] * v[j];
    acc += u[i] * row;
  }
  return acc;
}

// ---- flows --------------------------------------------------------------------

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

FlowLayer FlowLayer::make(std::size_t d_z, Rng& rng) {
  FlowLayer f{init_normal({1, d_z}, rng), init_normal({1, d_z}, rng), init_constant({1}, 0.0)};
  f.enforce_invertibility();
  return f;
}

FlowLayer FlowLayer::identity(std::size_t d_z) {
  return {init_constant({1, d_z}, 0.0), init_constant({1, d_z}, 0.0), init_constant({1}, 0.0)};
}

void FlowLayer::enforce_invertibility() {
  constexpr double kFloor = -1.0 + 1e-6;
  const double wu = dot(w.data(), u.data());
  if (wu >= kFloor) return;
  const double ww = dot(w.data(), w.data());
  // Softplus reparameterization target, kept strictly inside the bound.
  const double target = std::max(-1.0 + std::log1p(std::exp(wu)), kFloor + 1e-6);
  auto ud = u.mutable_data();
  const auto wd = w.data();
  for (std::size_t i = 0; i < ud.size(); ++i) ud[i] += (target - wu) * wd[i] / ww;
}

FlowStack FlowStack::make(std::size_t d_z, std::size_t count, Rng& rng) {
  FlowStack s;
  for (std::size_t k = 0; k < count; ++k) s.layers.push_back(FlowLayer::make(d_z, rng));
  return s;
}

void FlowStack::enforce_invertibility() {
  for (auto& l : layers) l.enforce_invertibility();
}

void FlowStack::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::string p = prefix + "." + std::to_string(k);
    out.push_back({p + ".u", layers[k].u});
    out.push_back({p + ".w", layers[k].w});
    out.push_back({p + ".b", layers[k].b});
  }
}

FlowOutput apply_flow(const FlowStack& stack, const Tensor& z) {
  if (z.rank() != 2) throw DimensionError("apply_flow: expected [m x d_z] samples");
  const std::size_t m = z.rows();
  const Tensor ones({m, 1}, 1.0);
  FlowOutput out{z, Tensor({m, 1}, 0.0)};
  bool first = true;
  for (const auto& layer : stack.layers) {
    if (layer.u.cols() != z.cols()) throw DimensionError("apply_flow: layer width does not match samples");
    Tensor h = tanh(add_row(matmul_nt(out.z_prime, layer.w), layer.b));
    Tensor det = add(ones, matmul(sub(ones, square(h)), matmul_nt(layer.u, layer.w)));
    for (double v : det.data()) {
      if (!(std::fabs(v) >= 1e-12)) throw NumericError("apply_flow: Jacobian determinant vanished");
    }
    out.z_prime = add(out.z_prime, matmul(h, layer.u));
    Tensor ld = log_abs(det);
    out.log_det = first ? ld : add(out.log_det, ld);
    first = false;
  }
  return out;
}

Tensor invert_flow(const FlowStack& stack, const Tensor& z_prime) {
  const std::size_t m = z_prime.rows(), d = z_prime.cols();
  std::vector<double> y = z_prime.to_vector();
  for (auto it = stack.layers.rbegin(); it != stack.layers.rend(); ++it) {
    const auto u = it->u.data(), w = it->w.data();
    const double b = it->b[0], wu = dot(w, u);
    for (std::size_t r = 0; r < m; ++r) {
      std::span<double> row(y.data() + r * d, d);
      // a + wu * tanh(a) = w.y + b is monotone in a when wu > -1.
      const double c = dot(w, row) + b;
      double lo = c - std::fabs(wu) - 1.0, hi = c + std::fabs(wu) + 1.0;
      for (int iter = 0; iter < 200 && hi - lo > 0.0; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        if (mid + wu * std::tanh(mid) < c) lo = mid;
        else hi = mid;
      }
      const double t = std::tanh(0.5 * (lo + hi));
      for (std::size_t j = 0; j < d; ++j) row[j] -= u[j] * t;
    }
  }
  return Tensor({m, d}, std::move(y));
}

// ---- divergences --------------------------------------------------------------

Tensor mmd(const Tensor& q, const Tensor& p) {
  if (q.rank() != 2 || p.rank() != 2 || q.cols() != p.cols()) throw DimensionError("mmd: sample widths differ");
  if (q.rows() < 2 || p.rows() != q.rows()) throw DimensionError("mmd: need m >= 2 samples in both sets");
  auto kmean = [](const Tensor& a, const Tensor& b) { return mean(exp(scale(pairwise_sqdist(a, b), -1.0))); };
  return sub(add(kmean(q, q), kmean(p, p)), scale(kmean(q, p), 2.0));
}

Tensor kld_gaussian(const Tensor& mean, const Tensor& logvar) {
  if (mean.shape() != logvar.shape()) throw DimensionError("kld_gaussian: mean/logvar shapes differ");
  const Tensor ones(mean.shape(), 1.0);
  return scale(sum(sub(sub(add(exp(logvar), square(mean)), ones), logvar)), 0.5);
}

// ---- encoder --------------------------------------------------------------------

WretParams WretParams::make(std::size_t d, std::size_t heads, std::size_t d_z, std::size_t flows, Rng& rng) {
  WretParams p;
  p.d = d;
  p.d_z = d_z;
  p.encoder = DenseEncoderBlock::make(d, heads, rng);
  p.mean_head = Linear::make(d, d_z, rng);
  p.logvar_head = Linear::make(d, d_z, rng);
  p.flow = FlowStack::make(d_z, flows, rng);
  p.gen_hidden = Linear::make(d_z, d, rng);
  p.gen_out = Linear::make(d, d, rng);
  p.out = Linear::make(d, d, rng);
  return p;
}

void WretParams::collect(ParamList& out, const std::string& prefix) const {
  encoder.collect(out, prefix + ".encoder");
  mean_head.collect(out, prefix + ".mean");
  logvar_head.collect(out, prefix + ".logvar");
  flow.collect(out, prefix + ".flow");
  gen_hidden.collect(out, prefix + ".gen.hidden");
  gen_out.collect(out, prefix + ".gen.out");
  this->out.collect(out, prefix + ".out");
}

Tensor reparameterize(const Tensor& mean, const Tensor& logvar, const Tensor& eps) {
  if (eps.shape() != mean.shape()) throw DimensionError("reparameterize: noise shape differs from mean");
  return add(mean, mul(exp(scale(logvar, 0.5)), eps));
}

Tensor wret_states(const WretParams& params, const Tensor& x_seq, const std::vector<bool>& key_is_pad) {
  if (x_seq.rank() != 2 || x_seq.rows() == 0) throw DimensionError("wret: empty sequence");
  if (std::find(key_is_pad.begin(), key_is_pad.end(), true) == key_is_pad.end()) return params.encoder(x_seq);
  const SoftmaxMask mask = SoftmaxMask::keys(x_seq.rows(), key_is_pad);
  return params.encoder(x_seq, &mask);
}

Tensor wret_pool(const Tensor& states, const std::vector<bool>& key_is_pad) {
  if (key_is_pad.empty()) return mean_rows(states);
  std::vector<bool> keep(key_is_pad.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = !key_is_pad[i];
  return mean_rows(states, keep);
}

LatentState encode_posterior(const WretParams& params, const Tensor& pooled, const Tensor& eps) {
  LatentState s;
  s.mean = params.mean_head(pooled);
  s.logvar = clamp(params.logvar_head(pooled), kLogvarMin, kLogvarMax);
  s.z = reparameterize(s.mean, s.logvar, eps);
  FlowOutput f = apply_flow(params.flow, s.z);
  s.z_prime = f.z_prime;
  s.log_det = f.log_det;
  return s;
}

LatentState encode_posterior(const WretParams& params, const Tensor& x_seq, const std::vector<bool>& key_is_pad,
                             const Tensor& eps) {
  return encode_posterior(params, wret_pool(wret_states(params, x_seq, key_is_pad), key_is_pad), eps);
}

Tensor generate(const WretParams& params, const Tensor& z_prime) {
  return params.gen_out(tanh(params.gen_hidden(z_prime)));
}

Tensor wret_encode(const WretParams& params, const Tensor& states, const Tensor& generated) {
  if (states.rank() != 2 || states.rows() == 0) throw DimensionError("wret_encode: empty sequence");
  return params.out(add_row(states, generated));
}

WretLoss wret_objective(const Tensor& pooled, const LatentState& state, const Tensor& generated, double lambda,
                        double alpha, const Tensor& prior) {
  if (lambda < 0.0 || alpha < 0.0) throw std::invalid_argument("wret_objective: weights must be non-negative");
  const std::size_t m = state.z_prime.rows();
  WretLoss l;
  l.rec = mean(square(sub(pooled, generated)));
  l.mmd = m >= 2 ? mmd(state.z_prime, prior) : Tensor::scalar(0.0);
  l.kld = scale(kld_gaussian(state.mean, state.logvar), 1.0 / static_cast<double>(m));
  l.logdet = mean(state.log_det);
  require_finite(l.rec, "reconstruction loss");
  require_finite(l.mmd, "mmd");
  require_finite(l.kld, "kld");
  require_finite(l.logdet, "log-det");
  l.total = add(add(l.rec, scale(l.mmd, lambda)), scale(sub(l.kld, l.logdet), alpha));
  return l;
}

}  // namespace mtldr
