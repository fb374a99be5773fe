// SPDX-License-Identifier: Apache-2.0
#include "mtldr/model.hpp"

#include <stdexcept>

namespace mtldr {

Model Model::make(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.vocab < 5) throw std::invalid_argument("model: vocabulary too small");
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  m.text_embed = init_normal({cfg.vocab, cfg.d_model}, rng);
  m.audio_proj = Linear::make(kCepstra, cfg.d_model, rng);
  m.video_proj = Linear::make(kVideoBlockWidth, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.dfhc_depth; ++i) m.dfhc.push_back(DfhcBlock::make(cfg.d_model, cfg.heads, cfg.hcl_n, rng));
  m.wret = WretParams::make(cfg.d_model, cfg.heads, cfg.latent_dim, cfg.flows, rng);
  m.fusion = FusionParams::make(cfg.d_model, rng);
  // one video key: the attention weight is always 1, so Wq and Wk never get a gradient
  m.fusion.video.w_q.set_requires_grad(false);
  m.fusion.video.w_k.set_requires_grad(false);
  m.decoder = DecoderParams::make(cfg.vocab, cfg.d_model, cfg.heads, cfg.decoder_depth, rng);
  m.decoder.max_positions = cfg.max_target_positions;
  return m;
}

const std::vector<std::string>& Model::segment_names() {
  static const std::vector<std::string> names{"embeddings", "dfhc", "wret", "fusion", "decoder"};
  return names;
}

ParamList Model::segment(const std::string& name) const {
  ParamList out;
  if (name == "embeddings") {
    out.push_back({"text_embed", text_embed});
    audio_proj.collect(out, "audio_proj");
    video_proj.collect(out, "video_proj");
  } else if (name == "dfhc") {
    for (std::size_t i = 0; i < dfhc.size(); ++i) dfhc[i].collect(out, "block" + std::to_string(i));
  } else if (name == "wret") {
    wret.collect(out, "wret");
  } else if (name == "fusion") {
    fusion.collect(out, "fusion");
  } else if (name == "decoder") {
    decoder.collect(out, "decoder");
  } else {
    throw std::invalid_argument("unknown parameter segment '" + name + "'");
  }
  return out;
}

ParamList Model::parameters() const {
  ParamList all;
  for (const auto& s : segment_names()) {
    ParamList part = segment(s);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

std::uint64_t sample_key(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor latent_noise(const std::vector<const SampleInputs*>& batch, std::size_t d_z, std::uint64_t seed,
                    std::uint64_t step, std::uint64_t stream) {
  Tensor eps({batch.size(), d_z});
  auto data = eps.mutable_data();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Rng rng(derive_seed(seed, {sample_key(batch[i]->id), step, stream}));
    for (std::size_t j = 0; j < d_z; ++j) data[i * d_z + j] = rng.normal();
  }
  return eps;
}

BatchForward forward_batch(const Model& model, const std::vector<const SampleInputs*>& batch, const Tensor& eps) {
  if (batch.empty()) throw std::invalid_argument("forward_batch: empty batch");
  const auto& cfg = model.cfg;
  const std::size_t d = cfg.d_model;
  const std::size_t m = batch.size();

  std::vector<Tensor> dfhc_out(m), states(m), pooled_rows;
  std::vector<std::vector<bool>> pads(m);
  for (std::size_t i = 0; i < m; ++i) {
    const SampleInputs& s = *batch[i];
    pads[i] = pad_positions(s.tokens);
    const Tensor x = embed_with_positions(s.tokens, model.text_embed);
    if (cfg.use_video) {
      Tensor h = x;
      for (const auto& block : model.dfhc) h = dfhc_block_forward(block, h, pads[i]);
      const Tensor video = s.video.defined() ? ingest_video(s.video, model.video_proj).global_vec : Tensor({1, d}, 0.0);
      dfhc_out[i] = cross_modal_attention(h, video, model.fusion.video);
    }
    if (cfg.use_audio) {
      states[i] = wret_states(model.wret, x, pads[i]);
      pooled_rows.push_back(wret_pool(states[i], pads[i]));
    }
  }

  BatchForward out;
  if (cfg.use_audio) {
    out.pooled = m == 1 ? pooled_rows.front() : concat_rows(pooled_rows);
    out.latent = encode_posterior(model.wret, out.pooled, eps);
    out.generated = generate(model.wret, out.latent.z_prime);
  }
  for (std::size_t i = 0; i < m; ++i) {
    const SampleInputs& s = *batch[i];
    Tensor wret_out;
    if (cfg.use_audio) {
      const Tensor enc = wret_encode(model.wret, states[i], m == 1 ? out.generated : slice_rows(out.generated, i, 1));
      Tensor audio({1, d}, 0.0);
      std::vector<bool> audio_pad;
      if (s.mfcc.defined() && s.mfcc.rows() > 0) {
        AudioFeatures af = project_audio(s.mfcc, model.audio_proj);
        audio = af.frames;
        audio_pad.assign(af.frames.rows(), false);
        for (std::size_t r = af.valid_frames; r < audio_pad.size(); ++r) audio_pad[r] = true;
      }
      wret_out = cross_modal_attention(enc, audio, model.fusion.audio, audio_pad);
    }
    out.memories.push_back(fuse_streams(dfhc_out[i], pads[i], wret_out, pads[i], model.fusion.tag_embed));
  }
  return out;
}

FusedMemory encode_for_inference(const Model& model, const SampleInputs& sample) {
  const Tensor eps({1, model.cfg.latent_dim}, 0.0);
  return forward_batch(model, {&sample}, eps).memories.front();
}

}  // namespace mtldr
