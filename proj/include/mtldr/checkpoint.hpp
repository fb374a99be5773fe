// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file: "MTLG", u32 version, u32 segment count, then named
// length-prefixed segments: embeddings, dfhc, wret, fusion, decoder,
// optimizer, vocab, config. Little-endian throughout.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mtldr/config.hpp"
#include "mtldr/features.hpp"
#include "mtldr/model.hpp"
#include "mtldr/training.hpp"

namespace mtldr {

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  Vocabulary vocab;
  Model model;
  std::optional<Adam> optimizer;
  std::optional<TrainState> state;
};

// Written to a sibling temp file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab,
                     const TrainConfig& config, const Adam* optimizer = nullptr, const TrainState* state = nullptr);

// FormatError on a bad magic, version mismatch, missing segment or shape mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace mtldr
