// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "mtldr/training.hpp"
#include "model_fixtures.hpp"

using namespace mtldr;
using namespace mtldr::testing;

namespace {

std::vector<std::vector<double>> grads(const Trainer& t) {
  std::vector<std::vector<double>> out;
  for (const auto& p : t.parameters())
    out.push_back(p.tensor.has_grad() ? p.tensor.grad() : std::vector<double>(p.tensor.size(), 0.0));
  return out;
}

double max_rel_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      worst = std::max(worst, std::fabs(a[i][j] - b[i][j]) / std::max(1.0, std::fabs(a[i][j])));
  return worst;
}

std::vector<std::vector<double>> weights(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor.to_vector());
  return out;
}

}  // namespace

TEST_CASE("nll on hand cases") {
  Tensor right = Tensor::matrix({{0, 0, 0, 0, 50}, {0, 0, 0, 0, 50}});
  CHECK(nll_loss(right, std::vector<int>{4, 4}).item() < 1e-12);
  CHECK(nll_loss(right, std::vector<int>{4, 3}).item() > 24.0);
  // uniform: log V
  CHECK(std::fabs(nll_loss(Tensor({3, 7}, 0.0), std::vector<int>{4, 5, 6}).item() - std::log(7.0)) < 1e-12);
  // logits (0, 0, 0, 0, ln 3): partition 7
  Tensor two = Tensor::matrix({{0, 0, 0, 0, std::log(3.0)}});
  CHECK(std::fabs(nll_loss(two, std::vector<int>{4}).item() - std::log(7.0 / 3.0)) < 1e-12);
  CHECK(std::fabs(nll_loss(two, std::vector<int>{3}).item() - std::log(7.0)) < 1e-12);
  // PAD labels do not count
  Tensor mixed = Tensor::matrix({{0, 0, 0, 0, std::log(3.0)}, {5, -1, 2, 0, 0}});
  CHECK(nll_loss(mixed, std::vector<int>{3, kPadId}).item() == nll_loss(two, std::vector<int>{3}).item());
  CHECK_THROWS(nll_loss(mixed, std::vector<int>{kPadId, kPadId}));
  CHECK_THROWS_AS(nll_loss(mixed, std::vector<int>{3}), DimensionError);
}

TEST_CASE("learning-rate schedule knots") {
  CHECK(lr_at(0, 100, 1e-3) == 0.0);
  CHECK(lr_at(1, 100, 1e-3) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(50, 100, 1e-3) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(100, 100, 1e-3) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(400, 100, 1e-3) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(10000, 100, 1e-3) == doctest::Approx(1e-4).epsilon(1e-12));
  double prev = 0.0;
  for (std::size_t s = 1; s <= 100; ++s) {
    CHECK(lr_at(s, 100, 1e-3) > prev);
    prev = lr_at(s, 100, 1e-3);
  }
  for (std::size_t s = 101; s < 300; ++s) CHECK(lr_at(s, 100, 1e-3) < lr_at(s - 1, 100, 1e-3));
}

TEST_CASE("adam against a hand-rolled update") {
  Tensor w = init_constant({3}, 1.0);
  ParamList ps{{"w", w}};
  Adam adam(ps);
  const std::vector<double> g1{0.5, -2.0, 0.0}, g2{0.1, 0.1, -0.3};
  std::vector<double> m(3, 0), v(3, 0), ref(3, 1.0);
  int t = 0;
  for (const auto* g : {&g1, &g2}) {
    w.zero_grad();
    auto buf = w.mutable_grad();
    for (std::size_t i = 0; i < 3; ++i) buf[i] = (*g)[i];
    adam.step(ps, 0.01);
    ++t;
    for (std::size_t i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * (*g)[i];
      v[i] = 0.999 * v[i] + 0.001 * (*g)[i] * (*g)[i];
      ref[i] -= 0.01 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(w[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  }
  // first step moves each nonzero-gradient weight by about lr
  CHECK(adam.steps() == 2);
  std::stringstream ss;
  adam.write(ss);
  CHECK(Adam::read(ss) == adam);
}

TEST_CASE("gradient accumulation matches one large batch") {
  auto samples = random_samples(6, 20, 21);
  for (bool audio : {true, false}) {
    TrainConfig cfg = tiny_train_config();
    cfg.model.use_audio = audio;
    for (std::size_t k : {1u, 2u, 5u}) {
      INFO("audio " << audio << " accum " << k);
      Model m1 = Model::make(cfg.model, 22), m2 = Model::make(cfg.model, 22);
      Trainer acc(m1, cfg), big(m2, cfg);
      std::vector<Batch> micro;
      Batch joined;
      if (audio) {
        // the divergence term is nonlinear in the batch, so use identical micro-batches
        const Batch b{&samples[0], &samples[1], &samples[2]};
        for (std::size_t i = 0; i < k; ++i) {
          micro.push_back(b);
          joined.insert(joined.end(), b.begin(), b.end());
        }
      } else {
        for (std::size_t i = 0; i < k; ++i) {
          const Batch b{&samples[i % 6], &samples[(i + 3) % 6]};
          micro.push_back(b);
          joined.insert(joined.end(), b.begin(), b.end());
        }
      }
      const LossValues la = acc.accumulate_gradients(micro, 4);
      const LossValues lb = big.accumulate_gradients({joined}, 4);
      CHECK(std::fabs(la.total - lb.total) < 1e-9);
      CHECK(max_rel_diff(grads(acc), grads(big)) < 1e-9);
    }
  }
}

TEST_CASE("update applies the schedule and keeps flows invertible") {
  TrainConfig cfg = tiny_train_config();
  Model m = Model::make(cfg.model, 31);
  auto samples = random_samples(4, 20, 32);
  Trainer t(m, cfg);
  const auto before = weights(m);
  const StepMetrics s1 = t.update({{&samples[0], &samples[1]}});
  CHECK(s1.step == 1);
  CHECK(s1.lr == lr_at(1, cfg.warmup_steps, cfg.max_lr));
  CHECK(std::isfinite(s1.loss.total));
  CHECK(s1.loss.total == doctest::Approx(cfg.mle_weight * s1.loss.nll + s1.loss.rec + cfg.lambda * s1.loss.mmd +
                                         cfg.alpha * (s1.loss.kld - s1.loss.logdet)));
  CHECK(max_rel_diff(before, weights(m)) > 0.0);
  for (const auto& layer : m.wret.flow.layers) {
    double wu = 0.0;
    for (std::size_t j = 0; j < layer.u.size(); ++j) wu += layer.u[j] * layer.w[j];
    CHECK(wu >= -1.0);
  }
}

TEST_CASE("resume reproduces an uninterrupted run bit for bit") {
  TrainConfig cfg = tiny_train_config();
  cfg.accum_steps = 2;
  cfg.batch_size = 2;
  cfg.epochs = 2;
  auto samples = random_samples(10, 20, 41);  // 5 micro-batches, 3 updates per epoch

  Model straight = Model::make(cfg.model, 42);
  Trainer a(straight, cfg);
  std::vector<double> losses_a;
  TrainState saved_state;
  Adam saved_adam;
  std::vector<std::vector<double>> saved_weights;
  Trainer::Hooks hooks;
  hooks.on_step = [&](const StepMetrics& s) { losses_a.push_back(s.loss.total); };
  hooks.on_checkpoint = [&] {
    if (a.state().step == 2) {
      saved_state = a.state();
      saved_adam = a.optimizer();
      saved_weights = weights(straight);
    }
  };
  a.fit(samples, {}, hooks);
  REQUIRE(losses_a.size() == 6);
  CHECK(saved_state.step == 2);
  CHECK(saved_state.cursor == 4);

  Model resumed = Model::make(cfg.model, 999);
  auto ps = resumed.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i)
    std::copy(saved_weights[i].begin(), saved_weights[i].end(), ps[i].tensor.mutable_data().begin());
  Trainer b(resumed, cfg);
  b.state() = saved_state;
  b.optimizer() = saved_adam;
  std::vector<double> losses_b;
  Trainer::Hooks hb;
  hb.on_step = [&](const StepMetrics& s) { losses_b.push_back(s.loss.total); };
  b.fit(samples, {}, hb);
  REQUIRE(losses_b.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(losses_b[i] == losses_a[2 + i]);
  CHECK(max_rel_diff(weights(straight), weights(resumed)) == 0.0);
  CHECK(a.state() == b.state());
}

TEST_CASE("fit: loss falls, early stopping and the step cap") {
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 12;
  cfg.patience = 100;
  cfg.max_lr = 1e-2;
  auto samples = random_samples(4, 20, 51);
  Model m = Model::make(cfg.model, 52);
  Trainer t(m, cfg);
  std::vector<double> vals, nlls;
  std::ostringstream csv;
  write_metrics_header(csv);
  Trainer::Hooks h;
  h.on_step = [&](const StepMetrics& s) { write_metrics_row(csv, s); };
  h.on_epoch = [&](const StepMetrics& s) {
    vals.push_back(s.val_total);
    nlls.push_back(s.loss.nll);
    write_metrics_row(csv, s);
  };
  t.fit(samples, {}, h);
  REQUIRE(vals.size() == 12);
  CHECK(nlls.back() < 0.8 * nlls.front());
  CHECK(t.state().best_val == *std::min_element(vals.begin(), vals.end()));
  CHECK(csv.str().rfind("step,epoch,lr,nll,rec,mmd,kld,logdet,total,val_total\n", 0) == 0);

  // frozen weights: validation never improves after the first epoch
  TrainConfig frozen = cfg;
  frozen.max_lr = 0.0;
  frozen.patience = 2;
  Model m2 = Model::make(cfg.model, 53);
  Trainer f(m2, frozen);
  int bests = 0, epochs = 0;
  Trainer::Hooks hf;
  hf.on_best = [&] { ++bests; };
  hf.on_epoch = [&](const StepMetrics&) { ++epochs; };
  f.fit(samples, {}, hf);
  CHECK(bests == 1);
  CHECK(epochs == 3);
  CHECK(f.state().finished);

  TrainConfig capped = cfg;
  capped.max_steps = 3;
  Model m3 = Model::make(cfg.model, 54);
  Trainer c(m3, capped);
  c.fit(samples, {});
  CHECK(c.state().step == 3);
}

TEST_CASE("train state serialization") {
  TrainState s;
  s.step = 17;
  s.epoch = 3;
  s.cursor = 2;
  s.best_val = 1.25;
  s.bad_epochs = 1;
  std::stringstream ss;
  s.write(ss);
  CHECK(TrainState::read(ss) == s);
}
