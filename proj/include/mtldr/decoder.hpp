// SPDX-License-Identifier: Apache-2.0
//
// Transformer decoder over the fused memory, with greedy and beam search.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtldr/fusion.hpp"

namespace mtldr {

// Post-norm: masked self-attention, cross-attention over memory, feed-forward.
struct DecoderBlock {
  DenseAttention self_attn;
  LayerNormParams ln1;
  DenseAttention cross_attn;
  LayerNormParams ln2;
  FeedForward ffn;
  LayerNormParams ln3;

  static DecoderBlock make(std::size_t d, std::size_t heads, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct DecoderParams {
  std::size_t d = 512;
  std::size_t heads = 8;
  std::size_t vocab = 0;
  std::size_t max_positions = 64;
  Tensor embed;  // [vocab x d], not tied to the output layer
  std::vector<DecoderBlock> blocks;
  Linear out;    // d -> vocab

  static DecoderParams make(std::size_t vocab, std::size_t d, std::size_t heads, std::size_t depth, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

// One causally masked pass; row t depends on input[0..t] and the memory.
// Cross-attention traces (one entry per block and head) are appended to trace.
Tensor teacher_forced_logits(const DecoderParams& params, const FusedMemory& memory, std::span<const int> input,
                             AttentionTrace* cross_trace = nullptr);

// Next-token logits [vocab] after prefix (which starts with BOS).
Tensor decode_logits(const DecoderParams& params, const FusedMemory& memory, std::span<const int> prefix);

struct SearchConfig {
  std::size_t beams = 4;
  std::size_t max_len = 40;  // generated tokens, BOS excluded
  bool block_trigrams = true;
  double length_penalty = 0.7;
};

// sum_logprob / generated_length^length_penalty
double hypothesis_score(double sum_logprob, std::size_t generated, double length_penalty);

// True when appending tok to ids would repeat a trigram already in ids.
bool repeats_trigram(std::span<const int> ids, int tok);

// Tokens the search never emits (PAD, BOS).
bool never_generated(int tok);

struct Hypothesis {
  std::vector<int> ids;  // starts with BOS
  double logprob = 0.0;
  bool finished = false;  // ends with EOS
};

// Argmax per step, ties to the lowest id; stops at EOS or max_len.
std::vector<int> greedy_decode(const DecoderParams& params, const FusedMemory& memory, std::size_t max_len = 40,
                               bool block_trigrams = false);

Hypothesis beam_search_hypothesis(const DecoderParams& params, const FusedMemory& memory, const SearchConfig& cfg);
std::vector<int> beam_search(const DecoderParams& params, const FusedMemory& memory, const SearchConfig& cfg = {});

}  // namespace mtldr
