// SPDX-License-Identifier: Apache-2.0
//
// Dense building blocks shared by the encoders and the decoder.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mtldr/rng.hpp"
#include "mtldr/tensor.hpp"

namespace mtldr {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

constexpr double kInitStd = 0.02;

// N(0, stddev^2) leaf with requires_grad set.
Tensor init_normal(Shape shape, Rng& rng, double stddev = kInitStd);
Tensor init_constant(Shape shape, double value);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  static Linear make(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams make(std::size_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// Per-head attention probabilities captured during a forward pass.
struct AttentionTrace {
  std::vector<Tensor> heads;
};

// Scaled dot-product attention over already-projected q [T x d], k, v [S x d],
// split into `heads` column groups; head outputs are concatenated back to
// [T x d].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const SoftmaxMask* mask = nullptr, AttentionTrace* trace = nullptr);

struct DenseAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static DenseAttention make(std::size_t d, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& x_query, const Tensor& x_kv, const SoftmaxMask* mask = nullptr,
                    AttentionTrace* trace = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct FeedForward {
  Linear up, down;

  static FeedForward make(std::size_t d, std::size_t inner, Rng& rng);
  Tensor operator()(const Tensor& x) const { return down(relu(up(x))); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// Post-norm transformer encoder block: LN(x + Attn(x)), then LN(h + FFN(h)).
struct DenseEncoderBlock {
  DenseAttention attn;
  LayerNormParams ln1;
  FeedForward ffn;
  LayerNormParams ln2;

  static DenseEncoderBlock make(std::size_t d, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& x, const SoftmaxMask* mask = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Standard sinusoidal position table [positions x d].
Tensor sinusoidal_positions(std::size_t positions, std::size_t d);

}  // namespace mtldr
