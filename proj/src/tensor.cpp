// SPDX-License-Identifier: Apache-2.0
#include "mtldr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>

#include "mtldr/kernels.hpp"

namespace mtldr {
namespace {

thread_local GradTape* g_active_tape = nullptr;

using NodePtr = std::shared_ptr<TensorNode>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_output(Shape shape, std::vector<double> data, bool track) {
  Tensor out(std::move(shape), std::move(data));
  if (track) out.set_requires_grad(true);
  return out;
}

void record(std::function<void()> fn) { g_active_tape->record(std::move(fn)); }

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

void check_rank(const Tensor& t, std::size_t lo, std::size_t hi, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
  if (t.rank() < lo || t.rank() > hi) {
    throw DimensionError(std::string(op) + ": unsupported rank for shape " + shape_str(t.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Applies f elementwise and records dx = dy * df(x, y).
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const bool track = tracking({&x});
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor y = make_output(x.shape(), std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([xn, yn, df] {
      if (yn->grad.empty()) return;
      auto gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yn->grad[i] * df(xn->data[i], yn->data[i]);
    });
  }
  return y;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<TensorNode>()) {
  if (shape.empty() || shape.size() > 3) throw DimensionError("tensor rank must be 1..3, got " + shape_str(shape));
  node_->data.assign(product(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<TensorNode>()) {
  if (shape.empty() || shape.size() > 3) throw DimensionError("tensor rank must be 1..3, got " + shape_str(shape));
  if (product(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() on non-matrix " + shape_str(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() on non-matrix " + shape_str(shape()));
  return node_->shape[1];
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::clone() const { return Tensor(shape(), node_->data); }

// ---- GradTape ---------------------------------------------------------------

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw GradientError("backward called twice on the same tape without reset()");
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) throw GradientError("backward on a loss detached from the tape");
  consumed_ = true;
  loss.node()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void GradTape::reset() {
  entries_.clear();
  consumed_ = false;
}

GradTape* GradTape::active() { return g_active_tape; }

GradTape::Scope::Scope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
GradTape::Scope::~Scope() { g_active_tape = previous_; }

// ---- masks ------------------------------------------------------------------

SoftmaxMask SoftmaxMask::none(std::size_t rows, std::size_t cols) {
  return SoftmaxMask{rows, cols, std::vector<char>(rows * cols, 0)};
}

SoftmaxMask SoftmaxMask::causal(std::size_t n) {
  SoftmaxMask m = none(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = r + 1; c < n; ++c) m.masked[r * n + c] = 1;
  return m;
}

SoftmaxMask SoftmaxMask::keys(std::size_t rows, const std::vector<bool>& key_is_pad) {
  SoftmaxMask m = none(rows, key_is_pad.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < key_is_pad.size(); ++c) m.masked[r * m.cols + c] = key_is_pad[c] ? 1 : 0;
  return m;
}

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, 3, "matmul");
  check_rank(b, 2, 3, "matmul");
  if (a.rank() == 2 && b.rank() == 3) throw DimensionError("matmul: rank-2 x rank-3 is not supported");
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb || (b.rank() == 3 && b.dim(0) != batch)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const bool track = tracking({&a, &b});
  const std::size_t b_stride = b.rank() == 3 ? k * n : 0;
  std::vector<double> out(batch * m * n);
  for (std::size_t s = 0; s < batch; ++s) {
    kernels::gemm_nn(a.data().subspan(s * m * k, m * k), b.data().subspan(s * b_stride, k * n),
                     std::span<double>(out).subspan(s * m * n, m * n), m, k, n);
  }
  Shape shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor c = make_output(std::move(shape), std::move(out), track);
  if (track) {
    NodePtr an = a.node(), bn = b.node(), cn = c.node();
    record([=] {
      if (cn->grad.empty()) return;
      const std::span<const double> dc = cn->grad;
      for (std::size_t s = 0; s < batch; ++s) {
        const auto dcs = dc.subspan(s * m * n, m * n);
        if (an->requires_grad) {
          kernels::gemm_nt(dcs, std::span<const double>(bn->data).subspan(s * b_stride, k * n),
                           an->grad_buffer().subspan(s * m * k, m * k), m, n, k, true);
        }
        if (bn->requires_grad) {
          kernels::gemm_tn(std::span<const double>(an->data).subspan(s * m * k, m * k), dcs,
                           bn->grad_buffer().subspan(s * b_stride, k * n), k, m, n, true);
        }
      }
    });
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, 2, "matmul_nt");
  check_rank(b, 2, 2, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const bool track = tracking({&a, &b});
  std::vector<double> out(m * n);
  kernels::gemm_nt(a.data(), b.data(), out, m, k, n);
  Tensor c = make_output({m, n}, std::move(out), track);
  if (track) {
    NodePtr an = a.node(), bn = b.node(), cn = c.node();
    record([=] {
      if (cn->grad.empty()) return;
      if (an->requires_grad) kernels::gemm_nn(cn->grad, bn->data, an->grad_buffer(), m, n, k, true);
      if (bn->requires_grad) kernels::gemm_tn(cn->grad, an->data, bn->grad_buffer(), n, m, k, true);
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  check_rank(a, 2, 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracking({&a});
  std::vector<double> out(m * n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  Tensor t = make_output({n, m}, std::move(out), track);
  if (track) {
    NodePtr an = a.node(), tn = t.node();
    record([=] {
      if (tn->grad.empty()) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += tn->grad[j * m + i];
    });
  }
  return t;
}

Tensor kron(const Tensor& p, const Tensor& q) {
  if (!p.defined() || !q.defined() || p.rank() != 2 || q.rank() != 2) {
    throw DimensionError("kron: both operands must be rank 2");
  }
  const std::size_t a = p.rows(), b = p.cols(), c = q.rows(), d = q.cols();
  const bool track = tracking({&p, &q});
  std::vector<double> out(a * b * c * d);
  kernels::kron(p.data(), q.data(), out, a, b, c, d);
  Tensor k = make_output({a * c, b * d}, std::move(out), track);
  if (track) {
    NodePtr pn = p.node(), qn = q.node(), kn = k.node();
    record([=] {
      if (kn->grad.empty()) return;
      const auto& g = kn->grad;
      const std::size_t oc = b * d;
      if (pn->requires_grad) {
        auto gp = pn->grad_buffer();
        for (std::size_t i = 0; i < a; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < c; ++r)
              for (std::size_t l = 0; l < d; ++l) acc += g[(i * c + r) * oc + j * d + l] * qn->data[r * d + l];
            gp[i * b + j] += acc;
          }
      }
      if (qn->requires_grad) {
        auto gq = qn->grad_buffer();
        for (std::size_t r = 0; r < c; ++r)
          for (std::size_t l = 0; l < d; ++l) {
            double acc = 0.0;
            for (std::size_t i = 0; i < a; ++i)
              for (std::size_t j = 0; j < b; ++j) acc += g[(i * c + r) * oc + j * d + l] * pn->data[i * b + j];
            gq[r * d + l] += acc;
          }
      }
    });
  }
  return k;
}

// ---- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor c = make_output(a.shape(), std::move(out), track);
  if (track) {
    NodePtr an = a.node(), bn = b.node(), cn = c.node();
    record([=] {
      if (cn->grad.empty()) return;
      for (NodePtr in : {an, bn}) {
        if (!in->requires_grad) continue;
        auto g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i];
      }
    });
  }
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor c = make_output(a.shape(), std::move(out), track);
  if (track) {
    NodePtr an = a.node(), bn = b.node(), cn = c.node();
    record([=] {
      if (cn->grad.empty()) return;
      if (an->requires_grad) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= cn->grad[i];
      }
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor c = make_output(a.shape(), std::move(out), track);
  if (track) {
    NodePtr an = a.node(), bn = b.node(), cn = c.node();
    record([=] {
      if (cn->grad.empty()) return;
      if (an->requires_grad) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * an->data[i];
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_row(const Tensor& x, const Tensor& v) {
  check_rank(x, 2, 2, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (v.size() != n) {
    throw DimensionError("add_row: row vector " + shape_str(v.shape()) + " does not match " + shape_str(x.shape()));
  }
  const bool track = tracking({&x, &v});
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + v[j];
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), vn = v.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      if (xn->requires_grad) {
        auto g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
      }
      if (vn->requires_grad) {
        auto g = vn->grad_buffer();
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += yn->grad[i * n + j];
          g[j] += acc;
        }
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
  }
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor log_abs(const Tensor& x) {
  for (double v : x.data()) {
    if (v == 0.0 || !std::isfinite(v)) throw NumericError("log|x| of zero or non-finite value");
  }
  return unary(x, [](double v) { return std::log(std::fabs(v)); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor s = make_output({1}, {acc}, track);
  if (track) {
    NodePtr xn = x.node(), sn = s.node();
    record([=] {
      if (sn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (double& v : g) v += sn->grad[0];
    });
  }
  return s;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mean_rows(const Tensor& x, const std::vector<bool>& keep) {
  check_rank(x, 2, 2, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (!keep.empty() && keep.size() != m) throw DimensionError("mean_rows: keep mask length mismatch");
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) count += (keep.empty() || keep[i]) ? 1 : 0;
  if (count == 0) throw DimensionError("mean_rows: no rows selected");
  const double inv = 1.0 / static_cast<double>(count);
  const bool track = tracking({&x});
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (!keep.empty() && !keep[i]) continue;
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  }
  for (double& v : out) v *= inv;
  Tensor y = make_output({1, n}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        if (!keep.empty() && !keep[i]) continue;
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += yn->grad[j] * inv;
      }
    });
  }
  return y;
}

// ---- normalization -----------------------------------------------------------------

void require_finite(const Tensor& x, const char* what) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite input");
  }
}

Tensor softmax_rows(const Tensor& x, const SoftmaxMask* mask) {
  check_rank(x, 2, 2, "softmax_rows");
  require_finite(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (mask != nullptr && (mask->rows != m || mask->cols != n)) throw DimensionError("softmax_rows: mask shape mismatch");
  const bool track = tracking({&x});
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask == nullptr || !(*mask)(i, j)) mx = std::max(mx, x[i * n + j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: every entry of a row is masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask != nullptr && (*mask)(i, j)) continue;
      out[i * n + j] = std::exp(x[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += yn->grad[i * n + j] * yn->data[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += yn->data[i * n + j] * (yn->grad[i * n + j] - dot);
      }
    });
  }
  return y;
}

Tensor log_softmax_rows(const Tensor& x) {
  check_rank(x, 2, 2, "log_softmax_rows");
  require_finite(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  const bool track = tracking({&x});
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[i * n + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] - lse;
  }
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += yn->grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += yn->grad[i * n + j] - std::exp(yn->data[i * n + j]) * gs;
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_rank(x, 2, 2, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 2) throw DimensionError("layer_norm: needs at least 2 features");
  if (gain.size() != n || bias.size() != n) throw DimensionError("layer_norm: gain/bias width mismatch");
  const bool track = tracking({&x, &gain, &bias});
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      const auto& dy = yn->grad;
      if (gn->requires_grad || bn->requires_grad) {
        auto gg = gn->grad_buffer();
        auto gb = bn->grad_buffer();
        for (std::size_t j = 0; j < n; ++j) {
          double ag = 0.0, ab = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            ag += dy[i * n + j] * xhat[i * n + j];
            ab += dy[i * n + j];
          }
          gg[j] += ag;
          gb[j] += ab;
        }
      }
      if (xn->requires_grad) {
        auto gx = xn->grad_buffer();
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = dy[i * n + j] * gn->data[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[i * n + j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return y;
}

// ---- structural -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (product(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool track = tracking({&x});
  Tensor y = make_output(std::move(shape), x.to_vector(), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
    });
  }
  return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  bool track = false;
  for (const auto& p : parts) {
    check_rank(p, 2, 2, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
    m += p.rows();
    track = track || tracking({&p});
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    NodePtr yn = y.node();
    record([nodes, yn] {
      if (yn->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& pn : nodes) {
        if (pn->requires_grad) {
          auto g = pn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[offset + i];
        }
        offset += pn->data.size();
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool track = false;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    check_rank(p, 2, 2, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    offsets.push_back(n);
    n += p.cols();
    track = track || tracking({&p});
  }
  std::vector<double> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + offsets[k] + j] = parts[k][i * w + j];
  }
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    NodePtr yn = y.node();
    record([nodes, offsets, yn, m, n] {
      if (yn->grad.empty()) return;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!nodes[k]->requires_grad) continue;
        const std::size_t w = nodes[k]->shape[1];
        auto g = nodes[k]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += yn->grad[i * n + offsets[k] + j];
      }
    });
  }
  return y;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  check_rank(x, 2, 2, "slice_rows");
  const std::size_t n = x.cols();
  if (begin + count > x.rows() || count == 0) throw DimensionError("slice_rows: range out of bounds for " + shape_str(x.shape()));
  const bool track = tracking({&x});
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  Tensor y = make_output({count, n}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < count * n; ++i) g[begin * n + i] += yn->grad[i];
    });
  }
  return y;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  check_rank(x, 2, 2, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin + count > n || count == 0) throw DimensionError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  const bool track = tracking({&x});
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + begin + j];
  Tensor y = make_output({m, count}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += yn->grad[i * count + j];
    });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  check_rank(table, 2, 2, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(vocab) + " rows");
    }
  }
  const bool track = tracking({&table});
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto row = table.data().subspan(static_cast<std::size_t>(ids[t]) * d, d);
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  Tensor y = make_output({ids.size(), d}, std::move(out), track);
  if (track) {
    NodePtr tn = table.node(), yn = y.node();
    std::vector<int> idv(ids.begin(), ids.end());
    record([tn, yn, idv, d] {
      if (yn->grad.empty()) return;
      auto g = tn->grad_buffer();
      for (std::size_t t = 0; t < idv.size(); ++t)
        for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[t]) * d + j] += yn->grad[t * d + j];
    });
  }
  return y;
}

Tensor gather_cols(const Tensor& x, std::span<const int> cols) {
  check_rank(x, 2, 2, "gather_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (cols.size() != m) throw DimensionError("gather_cols: index count does not match rows");
  for (int c : cols) {
    if (c < 0 || static_cast<std::size_t>(c) >= n) throw DimensionError("gather_cols: column index out of range");
  }
  const bool track = tracking({&x});
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = x[i * n + static_cast<std::size_t>(cols[i])];
  Tensor y = make_output({m}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node(), yn = y.node();
    std::vector<int> cv(cols.begin(), cols.end());
    record([xn, yn, cv, n] {
      if (yn->grad.empty()) return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < cv.size(); ++i) g[i * n + static_cast<std::size_t>(cv[i])] += yn->grad[i];
    });
  }
  return y;
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, 2, "pairwise_sqdist");
  check_rank(b, 2, 2, "pairwise_sqdist");
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  if (b.cols() != d) throw DimensionError("pairwise_sqdist: width mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool track = tracking({&a, &b});
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[i * d + k] - b[j * d + k];
        acc += diff * diff;
      }
      out[i * n + j] = acc;
    }
  Tensor y = make_output({m, n}, std::move(out), track);
  if (track) {
    NodePtr an = a.node(), bn = b.node(), yn = y.node();
    record([=] {
      if (yn->grad.empty()) return;
      std::span<double> ga = an->requires_grad ? an->grad_buffer() : std::span<double>{};
      std::span<double> gb = bn->requires_grad ? bn->grad_buffer() : std::span<double>{};
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = 2.0 * yn->grad[i * n + j];
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = an->data[i * d + k] - bn->data[j * d + k];
            if (!ga.empty()) ga[i * d + k] += g * diff;
            if (!gb.empty()) gb[j * d + k] -= g * diff;
          }
        }
    });
  }
  return y;
}

}  // namespace mtldr
