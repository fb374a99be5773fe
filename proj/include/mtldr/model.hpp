// SPDX-License-Identifier: Apache-2.0
//
// The full summarizer: text through the hyper-complex encoder (fused with the
// video vector) and through the variational encoder (fused with audio frames),
// both streams concatenated as decoder memory.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mtldr/decoder.hpp"
#include "mtldr/dfhc.hpp"
#include "mtldr/features.hpp"
#include "mtldr/wret.hpp"

namespace mtldr {

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t hcl_n = 4;
  std::size_t dfhc_depth = 2;
  std::size_t latent_dim = 64;
  std::size_t flows = 4;
  std::size_t decoder_depth = 2;
  std::size_t vocab = 0;
  std::size_t max_target_positions = 64;
  bool use_video = true;
  bool use_audio = true;
};

struct Model {
  ModelConfig cfg;
  Tensor text_embed;  // [vocab x d], shared by both text encoders
  Linear audio_proj;  // 40 -> d
  Linear video_proj;  // 2048 -> d
  std::vector<DfhcBlock> dfhc;
  WretParams wret;
  FusionParams fusion;
  DecoderParams decoder;

  static Model make(const ModelConfig& cfg, std::uint64_t seed);

  // Named parameters grouped by checkpoint segment.
  ParamList segment(const std::string& name) const;
  ParamList parameters() const;
  static const std::vector<std::string>& segment_names();
};

// One sample's model inputs. mfcc / video may be undefined (modality missing).
struct SampleInputs {
  std::string id;
  std::vector<int> tokens;  // BOS ... [EOS]
  Tensor mfcc;              // [T x 40]
  Tensor video;             // [B x 2048]
  std::vector<int> target;  // BOS ... EOS (empty at inference)
};

struct BatchForward {
  std::vector<FusedMemory> memories;
  Tensor pooled;  // [m x d]
  LatentState latent;
  Tensor generated;  // [m x d]
};

// Latent noise rows: eps[i] drawn from the stream keyed by (seed, sample id, step).
Tensor latent_noise(const std::vector<const SampleInputs*>& batch, std::size_t d_z, std::uint64_t seed,
                    std::uint64_t step, std::uint64_t stream);

std::uint64_t sample_key(const std::string& id);

// eps rows as above; pass zeros for the posterior mean.
BatchForward forward_batch(const Model& model, const std::vector<const SampleInputs*>& batch, const Tensor& eps);

// Decoder memory for one sample at inference (posterior mean latent).
FusedMemory encode_for_inference(const Model& model, const SampleInputs& sample);

}  // namespace mtldr
