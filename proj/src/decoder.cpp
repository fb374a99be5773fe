// SPDX-License-Identifier: Apache-2.0
#include "mtldr/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mtldr/features.hpp"

namespace mtldr {

DecoderBlock DecoderBlock::make(std::size_t d, std::size_t heads, Rng& rng) {
  DecoderBlock b;
  b.self_attn = DenseAttention::make(d, heads, rng);
  b.ln1 = LayerNormParams::make(d);
  b.cross_attn = DenseAttention::make(d, heads, rng);
  b.ln2 = LayerNormParams::make(d);
  b.ffn = FeedForward::make(d, 4 * d, rng);
  b.ln3 = LayerNormParams::make(d);
  return b;
}

void DecoderBlock::collect(ParamList& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self");
  ln1.collect(out, prefix + ".ln1");
  cross_attn.collect(out, prefix + ".cross");
  ln2.collect(out, prefix + ".ln2");
  ffn.collect(out, prefix + ".ffn");
  ln3.collect(out, prefix + ".ln3");
}

DecoderParams DecoderParams::make(std::size_t vocab, std::size_t d, std::size_t heads, std::size_t depth, Rng& rng) {
  DecoderParams p;
  p.d = d;
  p.heads = heads;
  p.vocab = vocab;
  p.embed = init_normal({vocab, d}, rng);
  for (std::size_t i = 0; i < depth; ++i) p.blocks.push_back(DecoderBlock::make(d, heads, rng));
  p.out = Linear::make(d, vocab, rng);
  return p;
}

void DecoderParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".embed", embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
  this->out.collect(out, prefix + ".out");
}

Tensor teacher_forced_logits(const DecoderParams& params, const FusedMemory& memory, std::span<const int> input,
                             AttentionTrace* cross_trace) {
  if (input.empty()) throw DimensionError("decoder: empty input");
  if (input.size() > params.max_positions) {
    throw DimensionError("decoder: length " + std::to_string(input.size()) + " exceeds " +
                         std::to_string(params.max_positions) + " positions");
  }
  for (int id : input)
    if (id < 0 || static_cast<std::size_t>(id) >= params.vocab) throw DimensionError("decoder: token id out of range");
  const std::size_t t = input.size();
  Tensor x = add(embedding(params.embed, input), sinusoidal_positions(t, params.d));
  const SoftmaxMask causal = SoftmaxMask::causal(t);
  SoftmaxMask mem_mask;
  const SoftmaxMask* mem_ptr = nullptr;
  if (std::find(memory.pad.begin(), memory.pad.end(), true) != memory.pad.end()) {
    mem_mask = SoftmaxMask::keys(t, memory.pad);
    mem_ptr = &mem_mask;
  }
  for (const auto& b : params.blocks) {
    Tensor h = b.ln1(add(x, b.self_attn(x, x, &causal)));
    h = b.ln2(add(h, b.cross_attn(h, memory.states, mem_ptr, cross_trace)));
    x = b.ln3(add(h, b.ffn(h)));
  }
  return params.out(x);
}

Tensor decode_logits(const DecoderParams& params, const FusedMemory& memory, std::span<const int> prefix) {
  if (prefix.empty() || prefix.front() != kBosId) throw DimensionError("decode_logits: prefix must start with BOS");
  Tensor all = teacher_forced_logits(params, memory, prefix);
  return reshape(slice_rows(all, prefix.size() - 1, 1), {params.vocab});
}

double hypothesis_score(double sum_logprob, std::size_t generated, double length_penalty) {
  return sum_logprob / std::pow(static_cast<double>(std::max<std::size_t>(generated, 1)), length_penalty);
}

bool repeats_trigram(std::span<const int> ids, int tok) {
  const std::size_t n = ids.size();
  if (n < 2) return false;
  const int a = ids[n - 2], b = ids[n - 1];
  for (std::size_t i = 0; i + 2 < n; ++i)
    if (ids[i] == a && ids[i + 1] == b && ids[i + 2] == tok) return true;
  return false;
}

bool never_generated(int tok) { return tok == kPadId || tok == kBosId; }

namespace {

std::vector<double> log_probs(const DecoderParams& params, const FusedMemory& memory, std::span<const int> prefix) {
  Tensor logits = decode_logits(params, memory, prefix);
  return log_softmax_rows(reshape(logits, {1, params.vocab})).to_vector();
}

}  // namespace

std::vector<int> greedy_decode(const DecoderParams& params, const FusedMemory& memory, std::size_t max_len,
                               bool block_trigrams) {
  std::vector<int> ids{kBosId};
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto lp = log_probs(params, memory, ids);
    int best = -1;
    for (int tok = 0; tok < static_cast<int>(params.vocab); ++tok) {
      if (never_generated(tok) || (block_trigrams && repeats_trigram(ids, tok))) continue;
      if (best < 0 || lp[tok] > lp[best]) best = tok;
    }
    if (best < 0) break;
    ids.push_back(best);
    if (best == kEosId) break;
  }
  return ids;
}

Hypothesis beam_search_hypothesis(const DecoderParams& params, const FusedMemory& memory, const SearchConfig& cfg) {
  if (cfg.beams == 0) throw std::invalid_argument("beam_search: beams must be >= 1");
  std::vector<Hypothesis> live{{{kBosId}, 0.0, false}};
  std::vector<Hypothesis> finished, truncated;
  for (std::size_t step = 0; step < cfg.max_len && !live.empty(); ++step) {
    std::vector<Hypothesis> cands;
    for (const auto& h : live) {
      const auto lp = log_probs(params, memory, h.ids);
      for (int tok = 0; tok < static_cast<int>(params.vocab); ++tok) {
        if (never_generated(tok) || (cfg.block_trigrams && repeats_trigram(h.ids, tok))) continue;
        Hypothesis c{h.ids, h.logprob + lp[tok], tok == kEosId};
        c.ids.push_back(tok);
        cands.push_back(std::move(c));
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Hypothesis& a, const Hypothesis& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.ids < b.ids;
    });
    if (cands.size() > cfg.beams) cands.resize(cfg.beams);
    live.clear();
    for (auto& c : cands) {
      if (c.finished) finished.push_back(std::move(c));
      else if (step + 1 == cfg.max_len) truncated.push_back(std::move(c));
      else live.push_back(std::move(c));
    }
  }
  const auto& pool = finished.empty() ? truncated : finished;
  if (pool.empty()) return {{kBosId}, 0.0, false};
  const Hypothesis* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const auto& h : pool) {
    const double s = hypothesis_score(h.logprob, h.ids.size() - 1, cfg.length_penalty);
    if (!best || s > best_score || (s == best_score && h.ids < best->ids)) {
      best = &h;
      best_score = s;
    }
  }
  return *best;
}

std::vector<int> beam_search(const DecoderParams& params, const FusedMemory& memory, const SearchConfig& cfg) {
  return beam_search_hypothesis(params, memory, cfg).ids;
}

}  // namespace mtldr
