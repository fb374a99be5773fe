// SPDX-License-Identifier: Apache-2.0
#include "mtldr/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>

#include "mtldr/tensor_io.hpp"

namespace mtldr {

Tensor nll_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.rows() != labels.size()) throw DimensionError("nll_loss: labels do not match logits rows");
  std::vector<double> keep(labels.size());
  std::vector<int> cols(labels.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    keep[i] = labels[i] == kPadId ? 0.0 : 1.0;
    cols[i] = labels[i] == kPadId ? 0 : labels[i];
    count += labels[i] != kPadId;
  }
  if (count == 0) throw std::invalid_argument("nll_loss: every label is padding");
  const Tensor picked = gather_cols(log_softmax_rows(logits), cols);
  return scale(sum(mul(picked, Tensor::vector(std::move(keep)))), -1.0 / static_cast<double>(count));
}

double lr_at(std::size_t step, std::size_t warmup_steps, double max_lr) {
  if (step == 0) return 0.0;
  const double s = static_cast<double>(step), w = static_cast<double>(std::max<std::size_t>(warmup_steps, 1));
  return s <= w ? max_lr * s / w : max_lr * std::sqrt(w / s);
}

// ---- Adam ---------------------------------------------------------------------

Adam::Adam(const ParamList& params) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::step(ParamList& params, double lr) {
  if (params.size() != m_.size()) throw std::invalid_argument("adam: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    if (p.size() != m_[i].size()) throw std::invalid_argument("adam: shape changed for " + params[i].name);
    const std::vector<double> g = p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps);
    }
  }
}

void Adam::write(std::ostream& os) const {
  le::put_u64(os, t_);
  le::put_u64(os, m_.size());
  for (std::size_t i = 0; i < m_.size(); ++i) {
    le::put_u64(os, m_[i].size());
    for (double x : m_[i]) le::put_f64(os, x);
    for (double x : v_[i]) le::put_f64(os, x);
  }
}

Adam Adam::read(std::istream& is) {
  Adam a;
  a.t_ = le::get_u64(is);
  const std::uint64_t n = le::get_u64(is);
  if (n > (1u << 20)) throw FormatError("adam: implausible buffer count");
  a.m_.resize(n);
  a.v_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t len = le::get_u64(is);
    if (len > (std::uint64_t{1} << 32)) throw FormatError("adam: implausible buffer length");
    a.m_[i].resize(len);
    a.v_[i].resize(len);
    for (double& x : a.m_[i]) x = le::get_f64(is);
    for (double& x : a.v_[i]) x = le::get_f64(is);
  }
  return a;
}

void TrainState::write(std::ostream& os) const {
  le::put_u64(os, step);
  le::put_u64(os, epoch);
  le::put_u64(os, cursor);
  le::put_f64(os, best_val);
  le::put_u64(os, bad_epochs);
  le::put_u32(os, finished ? 1 : 0);
}

TrainState TrainState::read(std::istream& is) {
  TrainState s;
  s.step = le::get_u64(is);
  s.epoch = le::get_u64(is);
  s.cursor = le::get_u64(is);
  s.best_val = le::get_f64(is);
  s.bad_epochs = le::get_u64(is);
  s.finished = le::get_u32(is) != 0;
  return s;
}

// ---- metrics ------------------------------------------------------------------

void write_metrics_header(std::ostream& os) { os << "step,epoch,lr,nll,rec,mmd,kld,logdet,total,val_total\n"; }

void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  const auto old = os.precision(10);
  os << m.step << ',' << m.epoch << ',' << m.lr << ',' << m.loss.nll << ',' << m.loss.rec << ',' << m.loss.mmd << ','
     << m.loss.kld << ',' << m.loss.logdet << ',' << m.loss.total << ',';
  if (!std::isnan(m.val_total)) os << m.val_total;
  os << '\n';
  os.precision(old);
}

// ---- losses -------------------------------------------------------------------

LossValues LossTerms::values() const {
  LossValues v;
  v.nll = nll.item();
  v.total = total.item();
  if (wret.total.defined()) {
    v.rec = wret.rec.item();
    v.mmd = wret.mmd.item();
    v.kld = wret.kld.item();
    v.logdet = wret.logdet.item();
  }
  return v;
}

std::pair<std::vector<int>, std::vector<int>> split_target(const std::vector<int>& target) {
  if (target.size() < 2 || target.front() != kBosId) throw std::invalid_argument("target must be BOS + tokens");
  return {std::vector<int>(target.begin(), target.end() - 1), std::vector<int>(target.begin() + 1, target.end())};
}

namespace {
constexpr std::uint64_t kEpsStream = 1;
constexpr std::uint64_t kPriorStream = 2;
constexpr std::uint64_t kShuffleStream = 3;
}  // namespace

LossTerms batch_loss(const Model& model, const TrainConfig& cfg, const Batch& batch, std::uint64_t noise_step,
                     bool mean_latent) {
  const std::size_t d_z = model.cfg.latent_dim;
  const Tensor eps = mean_latent ? Tensor({batch.size(), d_z}, 0.0)
                                 : latent_noise(batch, d_z, cfg.seed, noise_step, kEpsStream);
  BatchForward fw = forward_batch(model, batch, eps);
  LossTerms out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto [input, labels] = split_target(batch[i]->target);
    Tensor li = nll_loss(teacher_forced_logits(model.decoder, fw.memories[i], input), labels);
    out.nll = out.nll.defined() ? add(out.nll, li) : li;
  }
  out.nll = scale(out.nll, 1.0 / static_cast<double>(batch.size()));
  require_finite(out.nll, "nll");
  out.total = scale(out.nll, cfg.mle_weight);
  if (model.cfg.use_audio) {
    const Tensor prior = latent_noise(batch, d_z, cfg.seed, noise_step, kPriorStream);
    out.wret = wret_objective(fw.pooled, fw.latent, fw.generated, cfg.lambda, cfg.alpha, prior);
    out.total = add(out.total, out.wret.total);
  }
  return out;
}

// ---- trainer ------------------------------------------------------------------

Trainer::Trainer(Model& model, TrainConfig cfg)
    : model_(model), cfg_(std::move(cfg)), params_(model.parameters()), adam_(params_) {}

LossValues Trainer::accumulate_gradients(const std::vector<Batch>& micro_batches, std::size_t noise_step) {
  if (micro_batches.empty()) throw std::invalid_argument("update: no micro-batches");
  for (auto& p : params_) p.tensor.zero_grad();
  const double inv = 1.0 / static_cast<double>(micro_batches.size());
  LossValues acc;
  for (const auto& mb : micro_batches) {
    GradTape tape;
    Tensor loss;
    LossValues v;
    {
      GradTape::Scope scope(tape);
      LossTerms terms = batch_loss(model_, cfg_, mb, noise_step);
      v = terms.values();
      loss = scale(terms.total, inv);
    }
    tape.backward(loss);
    acc.nll += v.nll * inv;
    acc.rec += v.rec * inv;
    acc.mmd += v.mmd * inv;
    acc.kld += v.kld * inv;
    acc.logdet += v.logdet * inv;
    acc.total += v.total * inv;
  }
  return acc;
}

StepMetrics Trainer::update(const std::vector<Batch>& micro_batches) {
  const std::size_t step = state_.step + 1;
  StepMetrics sm;
  sm.loss = accumulate_gradients(micro_batches, step);
  sm.lr = lr_at(step, cfg_.warmup_steps, cfg_.max_lr);
  adam_.step(params_, sm.lr);
  model_.wret.flow.enforce_invertibility();
  for (auto& p : params_) p.tensor.zero_grad();
  state_.step = step;
  sm.step = step;
  sm.epoch = state_.epoch;
  return sm;
}

double Trainer::validation_loss(const std::vector<SampleInputs>& samples) const {
  if (samples.empty()) throw std::invalid_argument("validation_loss: no samples");
  double total = 0.0;
  for (std::size_t b = 0; b < samples.size(); b += cfg_.batch_size) {
    Batch batch;
    for (std::size_t i = b; i < std::min(samples.size(), b + cfg_.batch_size); ++i) batch.push_back(&samples[i]);
    total += batch_loss(model_, cfg_, batch, 0, true).total.item() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(samples.size());
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch, std::size_t n) const {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(cfg_.seed, {kShuffleStream, epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

void Trainer::fit(const std::vector<SampleInputs>& train, const std::vector<SampleInputs>& valid, const Hooks& hooks) {
  if (train.empty()) throw std::invalid_argument("fit: empty training split");
  const auto& val_set = valid.empty() ? train : valid;
  const std::size_t n = train.size();
  const std::size_t micro_per_epoch = (n + cfg_.batch_size - 1) / cfg_.batch_size;
  auto step_cap_hit = [&] { return cfg_.max_steps > 0 && state_.step >= cfg_.max_steps; };

  while (!state_.finished && state_.epoch < cfg_.epochs) {
    const auto order = epoch_order(state_.epoch, n);
    StepMetrics last;
    last.epoch = state_.epoch;
    last.step = state_.step;
    while (state_.cursor < micro_per_epoch && !step_cap_hit()) {
      std::vector<Batch> group;
      for (std::size_t k = 0; k < cfg_.accum_steps && state_.cursor + k < micro_per_epoch; ++k) {
        Batch b;
        const std::size_t start = (state_.cursor + k) * cfg_.batch_size;
        for (std::size_t i = start; i < std::min(n, start + cfg_.batch_size); ++i) b.push_back(&train[order[i]]);
        group.push_back(std::move(b));
      }
      last = update(group);
      state_.cursor += group.size();
      if (hooks.on_step) hooks.on_step(last);
      if (hooks.on_checkpoint && state_.cursor < micro_per_epoch) hooks.on_checkpoint();
    }
    last.val_total = validation_loss(val_set);
    const bool capped = step_cap_hit();
    if (hooks.on_epoch) hooks.on_epoch(last);
    if (last.val_total < state_.best_val) {
      state_.best_val = last.val_total;
      state_.bad_epochs = 0;
      if (hooks.on_best) hooks.on_best();
    } else {
      ++state_.bad_epochs;
    }
    ++state_.epoch;
    state_.cursor = 0;
    if (state_.bad_epochs >= cfg_.patience || capped || state_.epoch >= cfg_.epochs) state_.finished = true;
    if (hooks.on_checkpoint) hooks.on_checkpoint();
  }
  state_.finished = true;
}

}  // namespace mtldr
