// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <functional>
#include <sstream>

#include "doctest.h"
#include "mtldr/gradcheck.hpp"
#include "mtldr/tensor.hpp"
#include "mtldr/tensor_io.hpp"
#include "test_util.hpp"

using namespace mtldr;
using mtldr::testing::max_abs_diff;
using mtldr::testing::naive_matmul;
using mtldr::testing::random_tensor;

TEST_CASE("matmul: identity and hand-computed product") {
  Rng rng(1);
  Tensor m = random_tensor({3, 3}, rng);
  Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  CHECK(max_abs_diff(matmul(eye, m), m) == 0.0);

  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor b = Tensor::matrix({{5}, {6}});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  const auto oracle = naive_matmul(a.data(), b.data(), 2, 2, 1);
  CHECK(oracle == std::vector<double>{17, 39});
  CHECK(c.to_vector() == oracle);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  Tensor a({2, 3}), b({2, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul: grad of sum(A*B) w.r.t. A is ones * B^T") {
  Rng rng(2);
  Tensor a = random_tensor({3, 4}, rng).set_requires_grad(true);
  Tensor b = random_tensor({4, 2}, rng);
  GradTape tape;
  {
    GradTape::Scope scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
  const auto g = a.grad();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) CHECK(g[i * 4 + k] == doctest::Approx(b[k * 2] + b[k * 2 + 1]).epsilon(1e-14));
  CHECK(grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a, 1e-5) < 1e-8);
}

TEST_CASE("matmul: batched rank-3 maps rank-2 products") {
  Rng rng(3);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng);
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 5});
  for (std::size_t s = 0; s < 2; ++s) {
    auto ref = naive_matmul(a.data().subspan(s * 12, 12), b.data().subspan(s * 20, 20), 3, 4, 5);
    CHECK(max_abs_diff(c.data().subspan(s * 15, 15), ref) < 1e-14);
  }
}

TEST_CASE("softmax_rows: examples") {
  Tensor s = softmax_rows(Tensor::matrix({{0, 0}, {1, 2}}));
  CHECK(s.at(0, 0) == 0.5);
  CHECK(s.at(0, 1) == 0.5);
  Tensor t = softmax_rows(Tensor::matrix({{1, 2, 3}}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double expected[] = {0.09003057, 0.24472847, 0.66524096};
  for (int j = 0; j < 3; ++j) {
    CHECK(t[j] == doctest::Approx(std::exp(j + 1.0) / z).epsilon(1e-14));
    CHECK(std::fabs(t[j] - expected[j]) < 5e-9);
  }
  Tensor big = softmax_rows(Tensor::matrix({{1000, 0}}));
  CHECK(big[0] == 1.0);
  CHECK(big[1] < 1e-300);
  CHECK_THROWS_AS(softmax_rows(Tensor::matrix({{NAN, 0}})), NumericError);
}

TEST_CASE("softmax_rows: masked entries get zero probability") {
  auto mask = SoftmaxMask::keys(2, {false, true, false});
  Tensor p = softmax_rows(Tensor::matrix({{1, 5, 1}, {0, 0, 3}}), &mask);
  CHECK(p.at(0, 1) == 0.0);
  CHECK(p.at(0, 0) == doctest::Approx(0.5));
  CHECK(p.at(1, 0) + p.at(1, 2) == doctest::Approx(1.0).epsilon(1e-15));
  auto all = SoftmaxMask::keys(1, {true, true});
  CHECK_THROWS_AS(softmax_rows(Tensor::matrix({{1, 2}}), &all), NumericError);
}

TEST_CASE("kron: definition oracle, identity and shapes") {
  Tensor i2 = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor i4 = kron(i2, i2);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(i4.at(r, c) == (r == c ? 1.0 : 0.0));

  Tensor p = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor q = Tensor::matrix({{0, 1}, {1, 0}});
  Tensor k = kron(p, q);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t l = 0; l < 2; ++l) CHECK(k.at(i * 2 + r, j * 2 + l) == p.at(i, j) * q.at(r, l));

  CHECK(kron(Tensor({2, 3}), Tensor({4, 5})).shape() == Shape{8, 15});
  CHECK_THROWS_AS(kron(Tensor({2}), Tensor({2, 2})), DimensionError);
}

TEST_CASE("elementwise ops") {
  Tensor r = relu(Tensor::vector({-1, 0, 2}));
  CHECK(r.to_vector() == std::vector<double>{0, 0, 2});
  CHECK(mtldr::tanh(Tensor::scalar(0)).item() == 0.0);
  CHECK_THROWS_AS(mtldr::log(Tensor::vector({1, 0})), NumericError);
  CHECK_THROWS_AS(mtldr::log(Tensor::vector({-2})), NumericError);

  Rng rng(4);
  Tensor x = random_tensor({5}, rng).set_requires_grad(true);
  GradTape tape;
  {
    GradTape::Scope scope(tape);
    tape.backward(sum(mtldr::exp(x)));
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(std::exp(x[i])).epsilon(1e-15));
  CHECK(grad_check([](const Tensor& v) { return sum(mtldr::exp(v)); }, x, 1e-5) < 1e-8);

  // relu subgradient at exactly zero is zero
  Tensor z = Tensor::vector({0.0}).set_requires_grad(true);
  GradTape tape2;
  {
    GradTape::Scope scope(tape2);
    tape2.backward(sum(relu(z)));
  }
  CHECK(z.grad()[0] == 0.0);
}

TEST_CASE("layer_norm examples") {
  Tensor g({2}, 1.0), b({2}, 0.0);
  Tensor c = layer_norm(Tensor::matrix({{3, 3}}), g, b);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == 0.0);
  Tensor y = layer_norm(Tensor::matrix({{1, 3}}), g, b);
  CHECK(std::fabs(y[0] + 1.0) < 1e-4);
  CHECK(std::fabs(y[1] - 1.0) < 1e-4);

  Rng rng(5);
  Tensor x = random_tensor({4, 7}, rng, -3, 3);
  Tensor out = layer_norm(x, Tensor({7}, 1.5), Tensor({7}, 0.0));
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < 7; ++j) m += out.at(i, j);
    CHECK(std::fabs(m / 7.0) < 1e-9);
  }
  CHECK_THROWS_AS(layer_norm(Tensor({2, 1}), Tensor({1}), Tensor({1})), DimensionError);
}

TEST_CASE("backward: analytic cases and error paths") {
  Rng rng(6);
  Tensor x = random_tensor({2, 3}, rng).set_requires_grad(true);
  {
    GradTape tape;
    GradTape::Scope scope(tape);
    tape.backward(sum(x));
  }
  CHECK(x.grad() == std::vector<double>(6, 1.0));
  x.zero_grad();
  {
    GradTape tape;
    GradTape::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == 2.0 * x[i]);

  GradTape tape;
  GradTape::Scope scope(tape);
  Tensor loss = sum(x);
  CHECK_THROWS_AS(tape.backward(mul(x, x)), DimensionError);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), GradientError);
  tape.reset();
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), GradientError);
}

TEST_CASE("backward: tape replays in exact reverse order") {
  Tensor x = Tensor::vector({1.0}).set_requires_grad(true);
  GradTape tape;
  GradTape::Scope scope(tape);
  std::vector<int> order;
  tape.record([&] { order.push_back(1); });
  Tensor y = scale(x, 2.0);
  tape.record([&] { order.push_back(2); });
  Tensor z = scale(y, 3.0);
  tape.record([&] { order.push_back(3); });
  Tensor loss = sum(z);
  CHECK(tape.size() == 6);
  tape.backward(loss);
  CHECK(order == std::vector<int>{3, 2, 1});
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("backward: two-layer MLP agrees with finite differences") {
  Rng rng(7);
  Tensor x = random_tensor({4, 5}, rng);
  Tensor w1 = random_tensor({5, 6}, rng), b1 = random_tensor({6}, rng);
  Tensor w2 = random_tensor({6, 3}, rng), b2 = random_tensor({3}, rng);
  auto f = [&] { return sum(square(add_row(matmul(mtldr::tanh(add_row(matmul(x, w1), b1)), w2), b2))); };
  CHECK(grad_check_params(f, {w1, b1, w2, b2, x}).max_rel_err < 1e-4);
}

TEST_CASE("grad_check: oracle behaviour") {
  Rng rng(8);
  Tensor x = random_tensor({6}, rng);
  CHECK(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x) < 1e-6);

  Tensor logits = reshape(random_tensor({5}, rng, -2, 2), {1, 5});
  const int target[] = {2};
  auto ce = [&](const Tensor& l) { return scale(sum(gather_cols(log_softmax_rows(l), target)), -1.0); };
  CHECK(grad_check(ce, logits) < 1e-5);

  // relu kink: the coordinate at exactly 0 is exempt and counted
  Tensor kinked = Tensor::vector({0.0, 0.5, -0.5});
  GradCheckOptions opts;
  opts.skip_kinks = true;
  auto res = grad_check_detailed([](const Tensor& v) { return sum(relu(v)); }, kinked, opts);
  CHECK(res.skipped_kinks == 1);
  CHECK(res.checked == 2);
  CHECK(res.max_rel_err < 1e-8);

  CHECK_THROWS_AS(grad_check([](const Tensor& v) { return sum(v); }, x, 1e-2), std::invalid_argument);
  int calls = 0;
  auto flaky = [&](const Tensor& v) { return scale(sum(v), 1.0 + 1e-3 * (++calls)); };
  CHECK_THROWS_AS(grad_check(flaky, x), std::runtime_error);
}

TEST_CASE("property: every differentiable op passes grad_check on 10 seeded inputs") {
  using Fn = std::function<Tensor(const Tensor&)>;
  Rng rng(9);
  Tensor other = random_tensor({3, 4}, rng);
  Tensor other_t = random_tensor({4, 2}, rng);
  Tensor qmat = random_tensor({2, 3}, rng);
  Tensor rowv = random_tensor({4}, rng);
  Tensor gain = random_tensor({4}, rng, 0.5, 1.5), lbias = random_tensor({4}, rng);
  Tensor weights = random_tensor({3, 4}, rng);
  auto w = [&](const Tensor& t) { return sum(mul(t, weights)); };
  const int ids[] = {2, 0, 2};
  const int cols[] = {1, 3, 0};
  std::vector<std::pair<const char*, Fn>> ops = {
      {"matmul", [&](const Tensor& x) { return sum(square(matmul(x, other_t))); }},
      {"matmul_nt", [&](const Tensor& x) { return sum(square(matmul_nt(x, other))); }},
      {"transpose", [&](const Tensor& x) { return sum(square(matmul(transpose(x), other))); }},
      {"kron", [&](const Tensor& x) { return sum(square(kron(x, qmat))); }},
      {"add", [&](const Tensor& x) { return w(square(add(x, other))); }},
      {"sub", [&](const Tensor& x) { return w(square(sub(other, x))); }},
      {"mul", [&](const Tensor& x) { return w(mul(x, other)); }},
      {"scale", [&](const Tensor& x) { return w(scale(x, -1.7)); }},
      {"add_row", [&](const Tensor& x) { return w(square(add_row(x, rowv))); }},
      {"tanh", [&](const Tensor& x) { return w(mtldr::tanh(x)); }},
      {"exp", [&](const Tensor& x) { return w(mtldr::exp(x)); }},
      {"log", [&](const Tensor& x) { return w(mtldr::log(add(square(x), Tensor({3, 4}, 0.5)))); }},
      {"log_abs", [&](const Tensor& x) { return w(log_abs(add(x, Tensor({3, 4}, 3.0)))); }},
      {"square", [&](const Tensor& x) { return w(square(x)); }},
      {"mean", [&](const Tensor& x) { return mean(square(x)); }},
      {"mean_rows", [&](const Tensor& x) { return sum(square(mean_rows(x, {true, false, true}))); }},
      {"softmax", [&](const Tensor& x) { return w(softmax_rows(x)); }},
      {"log_softmax", [&](const Tensor& x) { return w(log_softmax_rows(x)); }},
      {"layer_norm", [&](const Tensor& x) { return w(layer_norm(x, gain, lbias)); }},
      {"reshape", [&](const Tensor& x) { return sum(square(matmul_nt(reshape(x, {4, 3}), qmat))); }},
      {"concat_rows", [&](const Tensor& x) { return sum(square(matmul(concat_rows({x, other}), other_t))); }},
      {"concat_cols", [&](const Tensor& x) { return sum(square(matmul_nt(concat_cols({x, other}), concat_cols({other, x})))); }},
      {"slice_rows", [&](const Tensor& x) { return sum(square(slice_rows(x, 1, 2))); }},
      {"slice_cols", [&](const Tensor& x) { return w(square(concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 2)}))); }},
      {"embedding", [&](const Tensor& x) { return sum(square(embedding(x, ids))); }},
      {"gather_cols", [&](const Tensor& x) { return sum(square(gather_cols(x, cols))); }},
      {"pairwise_sqdist", [&](const Tensor& x) { return sum(mtldr::exp(scale(pairwise_sqdist(x, other), -0.5))); }},
      {"clamp", [&](const Tensor& x) { return w(clamp(x, -0.5, 0.5)); }},
  };
  for (const auto& [name, fn] : ops) {
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = random_tensor({3, 4}, rng);
      GradCheckOptions opts;
      opts.skip_kinks = std::string(name) == "clamp";
      worst = std::max(worst, grad_check_detailed(fn, x, opts).max_rel_err);
    }
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("property: softmax rows sum to one and are shift invariant") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5, 9}, rng, -20, 20);
    Tensor p = softmax_rows(x);
    Tensor shifted = x.clone();
    auto d = shifted.mutable_data();
    for (std::size_t i = 0; i < 5; ++i) {
      const double c = rng.uniform(-50, 50);
      for (std::size_t j = 0; j < 9; ++j) d[i * 9 + j] += c;
    }
    Tensor ps = softmax_rows(shifted);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) s += p.at(i, j);
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    CHECK(max_abs_diff(p, ps) < 1e-12);
  }
}

TEST_CASE("property: matmul associativity") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({5, 2}, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("property: backward is bit-deterministic") {
  auto run = [] {
    Rng rng(12);
    Tensor w = random_tensor({6, 6}, rng).set_requires_grad(true);
    Tensor x = random_tensor({4, 6}, rng);
    GradTape tape;
    GradTape::Scope scope(tape);
    tape.backward(sum(softmax_rows(matmul(mtldr::tanh(matmul(x, w)), w))));
    return w.grad();
  };
  CHECK(run() == run());
}

TEST_CASE("tensor binary format") {
  Tensor t = Tensor::matrix({{1.5, -2.0, 3.25}, {0.0, 1e-300, 7.0}});
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 4 + 2 * 8 + 6 * 8);
  CHECK(bytes.substr(0, 4) == "TNSR");
  CHECK(bytes[4] == 2);
  CHECK(bytes[8] == 2);
  CHECK(bytes[16] == 3);
  std::istringstream is(bytes, std::ios::binary);
  Tensor back = read_tensor(is);
  CHECK(back.shape() == t.shape());
  CHECK(back.to_vector() == t.to_vector());
  std::istringstream bad(std::string("TNSX") + bytes.substr(4), std::ios::binary);
  CHECK_THROWS_AS(read_tensor(bad), FormatError);
}
