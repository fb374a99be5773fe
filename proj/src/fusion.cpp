// SPDX-License-Identifier: Apache-2.0
#include "mtldr/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace mtldr {

CrossModalWeights CrossModalWeights::make(std::size_t d, std::size_t d_mod, Rng& rng) {
  return {init_normal({d, d}, rng), init_normal({d_mod, d}, rng), init_normal({d_mod, d}, rng),
          LayerNormParams::make(d)};
}

void CrossModalWeights::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".Wq", w_q});
  out.push_back({prefix + ".Wk", w_k});
  out.push_back({prefix + ".Wv", w_v});
  ln.collect(out, prefix + ".ln");
}

Tensor cross_modal_attention(const Tensor& x_text, const Tensor& x_mod, const CrossModalWeights& w,
                             const std::vector<bool>& mod_is_pad, AttentionTrace* trace) {
  if (x_text.rank() != 2 || x_mod.rank() != 2 || x_mod.rows() == 0) {
    throw DimensionError("cross_modal_attention: expected [T x d] text and non-empty [S x d_mod] modality");
  }
  if (x_text.cols() != w.w_q.rows() || x_mod.cols() != w.w_k.rows()) {
    throw DimensionError("cross_modal_attention: width mismatch, text " + shape_str(x_text.shape()) + ", modality " +
                         shape_str(x_mod.shape()));
  }
  SoftmaxMask mask;
  const SoftmaxMask* mask_ptr = nullptr;
  if (std::find(mod_is_pad.begin(), mod_is_pad.end(), true) != mod_is_pad.end()) {
    mask = SoftmaxMask::keys(x_text.rows(), mod_is_pad);
    mask_ptr = &mask;
  }
  Tensor e = multi_head_attention(matmul(x_text, w.w_q), matmul(x_mod, w.w_k), matmul(x_mod, w.w_v), 1, mask_ptr, trace);
  return w.ln(add(x_text, e));
}

FusionParams FusionParams::make(std::size_t d, Rng& rng) {
  FusionParams f;
  f.video = CrossModalWeights::make(d, d, rng);
  f.audio = CrossModalWeights::make(d, d, rng);
  f.tag_embed = init_normal({2, d}, rng);
  return f;
}

void FusionParams::collect(ParamList& out, const std::string& prefix) const {
  video.collect(out, prefix + ".video");
  audio.collect(out, prefix + ".audio");
  out.push_back({prefix + ".tags", tag_embed});
}

FusedMemory fuse_streams(const Tensor& dfhc_out, const std::vector<bool>& dfhc_pad, const Tensor& wret_out,
                         const std::vector<bool>& wret_pad, const Tensor& tag_embed) {
  if (!dfhc_out.defined() && !wret_out.defined()) throw std::invalid_argument("fuse_streams: both streams disabled");
  FusedMemory m;
  std::vector<Tensor> parts;
  auto append = [&](const Tensor& s, const std::vector<bool>& pad, StreamTag tag) {
    if (!s.defined()) return;
    if (s.rank() != 2 || s.cols() != tag_embed.cols()) throw DimensionError("fuse_streams: stream width mismatch");
    if (!pad.empty() && pad.size() != s.rows()) throw DimensionError("fuse_streams: pad mask length mismatch");
    parts.push_back(add_row(s, slice_rows(tag_embed, static_cast<std::size_t>(tag), 1)));
    for (std::size_t i = 0; i < s.rows(); ++i) {
      m.tags.push_back(tag);
      m.pad.push_back(!pad.empty() && pad[i]);
    }
  };
  append(dfhc_out, dfhc_pad, StreamTag::kDfhcVideo);
  append(wret_out, wret_pad, StreamTag::kWretAudio);
  m.states = parts.size() == 1 ? parts.front() : concat_rows(parts);
  return m;
}

}  // namespace mtldr
