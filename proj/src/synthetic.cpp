// SPDX-License-Identifier: Apache-2.0
#include "mtldr/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "mtldr/features.hpp"
#include "mtldr/manifest.hpp"
#include "mtldr/pipeline.hpp"
#include "mtldr/rng.hpp"
#include "mtldr/tensor_io.hpp"

namespace mtldr {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string>& word_list() {
  static const std::vector<std::string> w{
      "graph",   "neural",  "model",    "attention", "latent",  "video",    "audio",   "speech",  "summary",
      "dataset", "encoder", "decoder",  "token",     "learning", "vision",  "language", "signal",  "feature",
      "kernel",  "flow",    "transport", "quantum",  "robust",  "sparse",   "dense",   "policy",  "reward",
      "protein", "molecule", "physics", "network",   "memory",  "compiler", "proof",   "theorem", "search"};
  return w;
}

std::string words(Rng& rng, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += word_list()[rng.below(word_list().size())];
  }
  return s;
}

}  // namespace

fs::path write_synthetic_corpus(const fs::path& dir, const SyntheticOptions& o) {
  fs::create_directories(dir / "texts");
  fs::create_directories(dir / "audio");
  fs::create_directories(dir / "video");
  Rng rng(o.seed);
  Manifest m;
  const std::size_t total = o.train + o.valid + o.test;
  for (std::size_t i = 0; i < total; ++i) {
    SampleManifest s;
    char id[32];
    std::snprintf(id, sizeof id, "syn%03zu", i);
    s.id = id;
    s.split = i < o.train ? Split::kTrain : i < o.train + o.valid ? Split::kValid : Split::kTest;
    s.text_path = "texts/" + s.id + ".txt";
    write_file(dir / s.text_path, words(rng, o.text_words) + "\n");
    s.target = words(rng, o.summary_words);

    if (!(o.every_third_without_audio && i % 3 == 2)) {
      PcmAudio a;
      a.rate = kTargetRate;
      const double hz = 220.0 + 110.0 * static_cast<double>(i);
      const auto n = static_cast<std::size_t>(o.audio_seconds * kTargetRate);
      for (std::size_t k = 0; k < n; ++k)
        a.samples.push_back(0.5 * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(k) / kTargetRate));
      s.audio_path = "audio/" + s.id + ".wav";
      write_wav(dir / *s.audio_path, a);
    }

    Tensor v({o.video_blocks, kVideoBlockWidth});
    for (double& x : v.mutable_data()) x = rng.normal();
    s.video_feat_path = "video/" + s.id + ".tnsr";
    save_tensor(dir / *s.video_feat_path, v);

    s.metadata.title = "Synthetic sample " + std::to_string(i);
    s.metadata.year = 2023;
    m.samples.push_back(std::move(s));
  }
  const fs::path manifest = dir / "manifest.jsonl";
  write_file(manifest, serialize_manifest(m));
  return manifest;
}

}  // namespace mtldr
