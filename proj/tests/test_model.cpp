// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "mtldr/training.hpp"
#include "model_fixtures.hpp"

using namespace mtldr;
using namespace mtldr::testing;

TEST_CASE("memory layout: video stream then audio stream") {
  Model m = Model::make(tiny_model_config(), 1);
  auto samples = random_samples(3, 20, 2);
  samples[1].tokens.push_back(kPadId);
  samples[1].tokens.push_back(kPadId);
  const Tensor eps = latent_noise(pointers(samples), 4, 7, 1, 1);
  BatchForward fw = forward_batch(m, pointers(samples), eps);
  REQUIRE(fw.memories.size() == 3);
  CHECK(fw.pooled.shape() == Shape{3, 16});
  CHECK(fw.generated.shape() == Shape{3, 16});
  CHECK(fw.latent.log_det.shape() == Shape{3, 1});
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t t = samples[i].tokens.size();
    const FusedMemory& mem = fw.memories[i];
    CHECK(mem.states.shape() == Shape{2 * t, 16});
    for (std::size_t r = 0; r < t; ++r) {
      CHECK(mem.tags[r] == StreamTag::kDfhcVideo);
      CHECK(mem.tags[t + r] == StreamTag::kWretAudio);
      CHECK(mem.pad[r] == (samples[i].tokens[r] == kPadId));
      CHECK(mem.pad[t + r] == mem.pad[r]);
    }
  }
}

TEST_CASE("stream ablations and missing modalities") {
  auto samples = random_samples(2, 20, 3);
  samples[0].mfcc = Tensor();
  samples[1].video = Tensor();
  for (int mode = 0; mode < 3; ++mode) {
    ModelConfig c = tiny_model_config();
    c.use_video = mode != 1;
    c.use_audio = mode != 2;
    Model m = Model::make(c, 4);
    BatchForward fw = forward_batch(m, pointers(samples), Tensor({2, 4}, 0.0));
    for (std::size_t i = 0; i < 2; ++i) {
      const std::size_t t = samples[i].tokens.size();
      const auto& mem = fw.memories[i];
      CHECK(mem.length() == (mode == 0 ? 2 * t : t));
      if (mode == 1) CHECK(mem.tags.front() == StreamTag::kWretAudio);
      if (mode == 2) CHECK(mem.tags.back() == StreamTag::kDfhcVideo);
      for (double v : mem.states.data()) CHECK(std::isfinite(v));
    }
    CHECK(fw.pooled.defined() == c.use_audio);
  }
}

TEST_CASE("forward is deterministic and noise rows are keyed per sample") {
  Model m = Model::make(tiny_model_config(), 5);
  auto samples = random_samples(4, 20, 6);
  const auto all = pointers(samples);
  const Tensor e1 = latent_noise(all, 4, 11, 3, 1);
  const Tensor e2 = latent_noise(all, 4, 11, 3, 1);
  CHECK(max_abs_diff(e1, e2) == 0.0);
  CHECK(max_abs_diff(e1, latent_noise(all, 4, 11, 4, 1)) > 0.0);
  CHECK(max_abs_diff(e1, latent_noise(all, 4, 11, 3, 2)) > 0.0);
  // row of sample 2 does not depend on its batch mates
  const Tensor solo = latent_noise({&samples[2]}, 4, 11, 3, 1);
  CHECK(max_abs_diff(solo, slice_rows(e1, 2, 1)) == 0.0);

  const auto a = forward_batch(m, all, e1), b = forward_batch(m, all, e1);
  for (std::size_t i = 0; i < 4; ++i) CHECK(max_abs_diff(a.memories[i].states, b.memories[i].states) == 0.0);
  const FusedMemory inf = encode_for_inference(m, samples[0]);
  CHECK(max_abs_diff(inf.states, encode_for_inference(m, samples[0]).states) == 0.0);
}

TEST_CASE("model construction and parameter segments") {
  ModelConfig c = tiny_model_config();
  Model a = Model::make(c, 9), b = Model::make(c, 9), other = Model::make(c, 10);
  const auto pa = a.parameters(), pb = b.parameters(), po = other.parameters();
  REQUIRE(pa.size() == pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(max_abs_diff(pa[i].tensor, pb[i].tensor) == 0.0);
    differs = differs || max_abs_diff(pa[i].tensor, po[i].tensor) > 0.0;
    CHECK(pa[i].tensor.requires_grad() == (pa[i].name.rfind("fusion.video.W", 0) != 0 ||
                                           pa[i].name == "fusion.video.Wv"));
  }
  CHECK(differs);
  std::size_t total = 0;
  for (const auto& s : Model::segment_names()) total += a.segment(s).size();
  CHECK(total == pa.size());
  CHECK_THROWS(a.segment("optimizer"));
  ModelConfig small = c;
  small.vocab = 3;
  CHECK_THROWS(Model::make(small, 1));
}

TEST_CASE("every parameter receives a nonzero gradient") {
  TrainConfig cfg = tiny_train_config();
  Model m = Model::make(cfg.model, 12);
  auto samples = random_samples(6, 20, 13);
  Trainer trainer(m, cfg);
  std::vector<bool> seen(trainer.parameters().size(), false);
  for (std::size_t step = 0; step < 20; ++step) {
    std::vector<Batch> mbs{{&samples[step % 6], &samples[(step + 1) % 6], &samples[(step + 3) % 6]}};
    trainer.accumulate_gradients(mbs, step + 1);
    const auto& ps = trainer.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i].tensor.has_grad()) continue;
      for (double g : ps[i].tensor.grad())
        if (g != 0.0) seen[i] = true;
    }
    trainer.update(mbs);
  }
  std::size_t frozen = 0;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    INFO(trainer.parameters()[i].name);
    if (!trainer.parameters()[i].tensor.requires_grad()) {
      ++frozen;
      continue;
    }
    CHECK(seen[i]);
  }
  CHECK(frozen == 2);
}
