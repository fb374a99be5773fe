// SPDX-License-Identifier: Apache-2.0
// Small random models and samples.
#pragma once

#include <string>
#include <vector>

#include "mtldr/config.hpp"
#include "mtldr/model.hpp"
#include "test_util.hpp"

namespace mtldr::testing {

inline ModelConfig tiny_model_config(std::size_t vocab = 20) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.hcl_n = 2;
  c.dfhc_depth = 1;
  c.latent_dim = 4;
  c.flows = 2;
  c.decoder_depth = 1;
  c.vocab = vocab;
  c.max_target_positions = 48;
  return c;
}

inline TrainConfig tiny_train_config() {
  TrainConfig t;
  t.model = tiny_model_config();
  t.vocab_size = 64;
  t.batch_size = 2;
  t.accum_steps = 1;
  t.warmup_steps = 5;
  t.max_lr = 3e-3;
  t.epochs = 3;
  t.max_len_train = 12;
  t.search.max_len = 10;
  return t;
}

inline SampleInputs random_sample(const std::string& id, std::size_t vocab, Rng& rng, std::size_t len = 7,
                                  bool audio = true, bool video = true) {
  SampleInputs s;
  s.id = id;
  s.tokens.push_back(kBosId);
  for (std::size_t i = 0; i < len; ++i) s.tokens.push_back(4 + static_cast<int>(rng.below(vocab - 4)));
  s.tokens.push_back(kEosId);
  if (audio) s.mfcc = random_tensor({30, kCepstra}, rng, -3.0, 3.0);
  if (video) s.video = random_tensor({3, kVideoBlockWidth}, rng);
  s.target = {kBosId};
  for (std::size_t i = 0; i < 4; ++i) s.target.push_back(4 + static_cast<int>(rng.below(vocab - 4)));
  s.target.push_back(kEosId);
  return s;
}

inline std::vector<SampleInputs> random_samples(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SampleInputs> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_sample("s" + std::to_string(i), vocab, rng, 3 + i % 5));
  return out;
}

inline std::vector<const SampleInputs*> pointers(const std::vector<SampleInputs>& v) {
  std::vector<const SampleInputs*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace mtldr::testing
