// SPDX-License-Identifier: Apache-2.0
//
// Losses, the Adam optimizer, the warmup / inverse-sqrt schedule and the
// epoch loop with gradient accumulation, validation and early stopping.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "mtldr/config.hpp"
#include "mtldr/model.hpp"

namespace mtldr {

// Mean token negative log-likelihood of labels under logits [T x V]; PAD
// labels are excluded. All-PAD labels are an error.
Tensor nll_loss(const Tensor& logits, std::span<const int> labels);

// Linear warmup to max_lr over warmup_steps updates, then max_lr * sqrt(warmup / step).
// Steps count from 1; lr_at(0) is 0.
double lr_at(std::size_t step, std::size_t warmup_steps, double max_lr);

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Adam() = default;
  explicit Adam(const ParamList& params);

  // One update with the gradients currently held by params. Missing gradients count as zero.
  void step(ParamList& params, double lr);

  std::uint64_t steps() const { return t_; }
  void write(std::ostream& os) const;
  static Adam read(std::istream& is);
  bool operator==(const Adam&) const = default;

 private:
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainState {
  std::size_t step = 0;    // optimizer updates taken
  std::size_t epoch = 0;   // current epoch, 0-based
  std::size_t cursor = 0;  // next micro-batch within the epoch
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  bool finished = false;

  void write(std::ostream& os) const;
  static TrainState read(std::istream& is);
  bool operator==(const TrainState&) const = default;
};

struct LossValues {
  double nll = 0, rec = 0, mmd = 0, kld = 0, logdet = 0, total = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  LossValues loss;
  double val_total = std::numeric_limits<double>::quiet_NaN();  // set on epoch boundaries
};

// Metrics file columns.
void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const StepMetrics& m);

using Batch = std::vector<const SampleInputs*>;

struct LossTerms {
  Tensor nll, total;
  WretLoss wret;  // undefined tensors when the audio stream is off
  LossValues values() const;
};

// Loss of one micro-batch. Latent noise and prior draws are keyed by (seed, sample, noise_step);
// with mean_latent the posterior mean is used instead of a draw.
LossTerms batch_loss(const Model& model, const TrainConfig& cfg, const Batch& batch, std::uint64_t noise_step,
                     bool mean_latent = false);

// Decoder input (target without its last token) and labels (without BOS).
std::pair<std::vector<int>, std::vector<int>> split_target(const std::vector<int>& target);

class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg);

  // One optimizer update over micro_batches, each loss scaled by 1 / micro_batches.size().
  StepMetrics update(const std::vector<Batch>& micro_batches);
  // The gradient half of update(): clears, then accumulates into the parameters. Averaged loss values.
  LossValues accumulate_gradients(const std::vector<Batch>& micro_batches, std::size_t noise_step);
  const ParamList& parameters() const { return params_; }

  // Mean total loss over samples in batch_size chunks, posterior-mean latent.
  double validation_loss(const std::vector<SampleInputs>& samples) const;

  // Sample order of an epoch.
  std::vector<std::size_t> epoch_order(std::size_t epoch, std::size_t n) const;

  struct Hooks {
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(const StepMetrics&)> on_epoch;  // val_total set
    std::function<void()> on_best;                     // after best_val improves
    std::function<void()> on_checkpoint;               // after every update, for resumable runs
  };

  // Runs epochs from the current state until epochs, max_steps or patience stop it.
  // An empty valid set validates on train.
  void fit(const std::vector<SampleInputs>& train, const std::vector<SampleInputs>& valid, const Hooks& hooks = {});

  Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  Adam& optimizer() { return adam_; }
  const Adam& optimizer() const { return adam_; }

 private:
  Model& model_;
  TrainConfig cfg_;
  ParamList params_;
  Adam adam_;
  TrainState state_;
};

}  // namespace mtldr
