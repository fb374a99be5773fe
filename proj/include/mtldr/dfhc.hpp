// SPDX-License-Identifier: Apache-2.0
//
// Hyper-complex encoder: linear layers whose weight is a sum of Kronecker
// products, W = sum_i P_i (x) Q_i, used for the attention projections and the
// feed-forward sandwich of each encoder block.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtldr/nn.hpp"

namespace mtldr {

struct HCLParams {
  std::size_t n = 4;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  Tensor p;     // [n x n x n], component i is P_i
  Tensor q;     // [n x d_out/n x d_in/n], component i is Q_i
  Tensor bias;  // [d_out]

  static HCLParams make(std::size_t d_in, std::size_t d_out, std::size_t n, Rng& rng);

  // sum_i kron(P_i, Q_i) as a [d_out x d_in] tensor, differentiable in p and q.
  Tensor materialize() const;
  // Weight entries excluding the bias: n * (n^2 + d_out * d_in / n^2).
  std::size_t weight_count() const;
  void collect(ParamList& out, const std::string& prefix) const;
};

std::size_t hcl_weight_count(std::size_t d_in, std::size_t d_out, std::size_t n);

// x [T x d_in] -> x * W^T + b computed blockwise without materializing W.
Tensor hcl_forward(const HCLParams& params, const Tensor& x);

struct DfhcBlock {
  HCLParams q, k, v, o;
  HCLParams ffn_up, ffn_down;  // d -> 4d -> d
  LayerNormParams ln1, ln2;
  std::size_t heads = 8;

  static DfhcBlock make(std::size_t d, std::size_t heads, std::size_t n, Rng& rng);
  std::size_t width() const { return q.d_in; }
  void collect(ParamList& out, const std::string& prefix) const;
};

// LN(x + HCL_o(concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h)), Q/K/V from
// independent HCL projections. key_is_pad (optional) masks padded keys.
Tensor hc_attention(const DfhcBlock& block, const Tensor& x, const std::vector<bool>& key_is_pad = {},
                    AttentionTrace* trace = nullptr);

// LN(x + HCL(ReLU(HCL(x)))) with inner width 4d.
Tensor hc_ffn(const DfhcBlock& block, const Tensor& x);

Tensor dfhc_block_forward(const DfhcBlock& block, const Tensor& x, const std::vector<bool>& key_is_pad = {});

// Token embedding + sinusoidal positions, then the blocks in order. PAD (id 0)
// positions are masked as attention keys when mask_pad is set.
Tensor dfhc_encode(std::span<const DfhcBlock> blocks, std::span<const int> tokens, const Tensor& embed,
                   bool mask_pad = true);

// Embedding rows plus the sinusoidal position table.
Tensor embed_with_positions(std::span<const int> tokens, const Tensor& embed);
std::vector<bool> pad_positions(std::span<const int> tokens);

}  // namespace mtldr
