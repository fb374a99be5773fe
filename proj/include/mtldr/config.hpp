// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a UTF-8 key=value file. '#' starts a comment line;
// unknown keys are rejected.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "mtldr/decoder.hpp"
#include "mtldr/model.hpp"

namespace mtldr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 55;
  std::size_t accum_steps = 5;
  double max_lr = 3e-5;
  std::size_t warmup_steps = 10000;
  double mle_weight = 0.1;
  double lambda = 18.0;
  double alpha = 0.1;
  std::uint64_t seed = 1234;
  std::size_t batch_size = 4;
  std::size_t patience = 5;
  std::size_t max_steps = 0;  // 0: no cap
  double ranking_margin = 0.001;  // reserved, unused by any loss
  std::size_t vocab_size = 4096;
  std::size_t max_len_train = 36;
  ModelConfig model;
  SearchConfig search;

  TrainConfig() { search.max_len = 40; }
};

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
void validate(const TrainConfig& cfg);

TrainConfig parse_run_config(std::istream& is);
TrainConfig load_run_config(const std::filesystem::path& path);
// Canonical key=value text; parse_run_config(write) reproduces cfg exactly.
std::string format_run_config(const TrainConfig& cfg);

}  // namespace mtldr
