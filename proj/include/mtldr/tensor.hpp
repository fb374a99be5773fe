// SPDX-License-Identifier: Apache-2.0
//
// Dense rank-1..3 tensors of doubles with tape-based reverse-mode
// differentiation.
//
// A GradTape is activated on the current thread with GradTape::Scope. While a
// tape is active, every op with at least one requires_grad input records a
// backward closure on it; GradTape::backward replays those closures in exact
// reverse order. Without an active tape ops are plain forward evaluations.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtldr {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class GradientError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;

  void accumulate_grad(std::size_t i, double v) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += v;
  }
  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }
  // Leading/trailing extent of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  // Writable access for building inputs and updating parameters in place.
  std::span<double> mutable_data() { return node_->data; }
  std::vector<double> to_vector() const { return node_->data; }

  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated.
  std::vector<double> grad() const;
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy detached from any recorded graph.
  Tensor clone() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

class GradTape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays every recorded op in reverse.
  // A tape can be replayed once; reset() clears it for reuse.
  void backward(const Tensor& loss);
  void reset();

  static GradTape* active();

  class Scope {
   public:
    explicit Scope(GradTape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    GradTape* previous_;
  };

 private:
  std::vector<Backward> entries_;
  bool consumed_ = false;
};

// Element-wise boolean mask for attention-style softmax. `true` marks an entry
// excluded from the softmax (probability exactly zero).
struct SoftmaxMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<char> masked;  // rows * cols

  static SoftmaxMask none(std::size_t rows, std::size_t cols);
  static SoftmaxMask causal(std::size_t n);
  // Masks whole key columns, broadcast over every query row.
  static SoftmaxMask keys(std::size_t rows, const std::vector<bool>& key_is_pad);
  bool operator()(std::size_t r, std::size_t c) const { return masked[r * cols + c] != 0; }
};

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor transpose(const Tensor& a);
Tensor kron(const Tensor& p, const Tensor& q);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x[m x n] + v broadcast to every row (v has n elements).
Tensor add_row(const Tensor& x, const Tensor& v);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor log_abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over rows of x[m x n] -> [1 x n]; rows with keep[r] == false are skipped.
Tensor mean_rows(const Tensor& x, const std::vector<bool>& keep = {});

Tensor softmax_rows(const Tensor& x, const SoftmaxMask* mask = nullptr);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
// Rows of a rank-2 table selected by index: out[t] = table[ids[t]].
Tensor embedding(const Tensor& table, std::span<const int> ids);
// out[t] = x[t, cols[t]]
Tensor gather_cols(const Tensor& x, std::span<const int> cols);
// out[i, j] = sum_k (a[i,k] - b[j,k])^2
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);

void require_finite(const Tensor& x, const char* what);

}  // namespace mtldr
