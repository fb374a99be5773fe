// SPDX-License-Identifier: Apache-2.0
//
// Small seeded multimodal corpora for demos and end-to-end checks: short
// texts over a fixed word list, one sine tone per sample, random video blocks.
#pragma once

#include <cstdint>
#include <filesystem>

namespace mtldr {

struct SyntheticOptions {
  std::size_t train = 10;
  std::size_t valid = 0;
  std::size_t test = 0;
  std::size_t text_words = 12;
  std::size_t summary_words = 5;
  double audio_seconds = 1.0;
  std::size_t video_blocks = 3;
  bool every_third_without_audio = false;
  std::uint64_t seed = 7;
};

// Writes texts/, audio/, video/ and manifest.jsonl under dir; returns the manifest path.
std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir, const SyntheticOptions& opts);

}  // namespace mtldr
