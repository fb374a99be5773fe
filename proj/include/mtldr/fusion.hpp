// SPDX-License-Identifier: Apache-2.0
//
// Single-head cross attention from text states to another modality, and the
// time-concatenated decoder memory built from the two encoder streams.
#pragma once

#include <cstddef>
#include <vector>

#include "mtldr/nn.hpp"

namespace mtldr {

struct CrossModalWeights {
  Tensor w_q;  // d x d
  Tensor w_k;  // d_mod x d
  Tensor w_v;  // d_mod x d
  LayerNormParams ln;

  static CrossModalWeights make(std::size_t d, std::size_t d_mod, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

// LN(x_text + softmax(x_text W_q (x_mod W_k)^T / sqrt(d)) x_mod W_v).
// mod_is_pad (optional) masks modality rows.
Tensor cross_modal_attention(const Tensor& x_text, const Tensor& x_mod, const CrossModalWeights& w,
                             const std::vector<bool>& mod_is_pad = {}, AttentionTrace* trace = nullptr);

enum class StreamTag : int { kDfhcVideo = 0, kWretAudio = 1 };

struct FusedMemory {
  Tensor states;                // [(T1 + T2) x d]
  std::vector<StreamTag> tags;  // one per row
  std::vector<bool> pad;        // one per row

  std::size_t length() const { return tags.size(); }
};

struct FusionParams {
  CrossModalWeights video;
  CrossModalWeights audio;
  Tensor tag_embed;  // [2 x d], row per StreamTag

  static FusionParams make(std::size_t d, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

// Either stream may be undefined (disabled); both undefined is an error.
FusedMemory fuse_streams(const Tensor& dfhc_out, const std::vector<bool>& dfhc_pad, const Tensor& wret_out,
                         const std::vector<bool>& wret_pad, const Tensor& tag_embed);

}  // namespace mtldr
