// SPDX-License-Identifier: Apache-2.0
#include "mtldr/dfhc.hpp"

#include "mtldr/kernels.hpp"

namespace mtldr {

HCLParams HCLParams::make(std::size_t d_in, std::size_t d_out, std::size_t n, Rng& rng) {
  if (n == 0 || d_in % n != 0 || d_out % n != 0) {
    throw DimensionError("HCL: component count " + std::to_string(n) + " must divide d_in=" + std::to_string(d_in) +
                         " and d_out=" + std::to_string(d_out));
  }
  HCLParams h;
  h.n = n;
  h.d_in = d_in;
  h.d_out = d_out;
  h.p = init_normal({n, n, n}, rng);
  h.q = init_normal({n, d_out / n, d_in / n}, rng);
  h.bias = init_constant({d_out}, 0.0);
  return h;
}

Tensor HCLParams::materialize() const {
  const std::size_t qo = d_out / n, qi = d_in / n;
  Tensor p2 = reshape(p, {n * n, n});
  Tensor q2 = reshape(q, {n * qo, qi});
  Tensor total;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor term = kron(slice_rows(p2, i * n, n), slice_rows(q2, i * qo, qo));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

std::size_t hcl_weight_count(std::size_t d_in, std::size_t d_out, std::size_t n) {
  return n * (n * n + (d_out / n) * (d_in / n));
}

std::size_t HCLParams::weight_count() const { return hcl_weight_count(d_in, d_out, n); }

void HCLParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".P", p});
  out.push_back({prefix + ".Q", q});
  out.push_back({prefix + ".b", bias});
}

Tensor hcl_forward(const HCLParams& params, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != params.d_in) {
    throw DimensionError("hcl_forward: input " + shape_str(x.shape()) + " does not match d_in=" + std::to_string(params.d_in));
  }
  const kernels::HclDims dims{x.rows(), params.n, params.d_in, params.d_out};
  std::vector<double> out(dims.rows * dims.d_out);
  kernels::hcl_forward(dims, x.data(), params.p.data(), params.q.data(), params.bias.data(), out);
  GradTape* tape = GradTape::active();
  const bool track = tape != nullptr && (x.requires_grad() || params.p.requires_grad() ||
                                         params.q.requires_grad() || params.bias.requires_grad());
  Tensor y({dims.rows, dims.d_out}, std::move(out));
  if (track) {
    y.set_requires_grad(true);
    auto xn = x.node(), pn = params.p.node(), qn = params.q.node(), bn = params.bias.node(), yn = y.node();
    tape->record([=] {
      if (yn->grad.empty()) return;
      kernels::hcl_backward(dims, xn->data, pn->data, qn->data, yn->grad,
                            xn->requires_grad ? xn->grad_buffer() : std::span<double>{},
                            pn->requires_grad ? pn->grad_buffer() : std::span<double>{},
                            qn->requires_grad ? qn->grad_buffer() : std::span<double>{},
                            bn->requires_grad ? bn->grad_buffer() : std::span<double>{});
    });
  }
  return y;
}

DfhcBlock DfhcBlock::make(std::size_t d, std::size_t heads, std::size_t n, Rng& rng) {
  if (heads == 0 || d % heads != 0) throw DimensionError("DFHC block: width must be divisible by the head count");
  DfhcBlock b;
  b.q = HCLParams::make(d, d, n, rng);
  b.k = HCLParams::make(d, d, n, rng);
  b.v = HCLParams::make(d, d, n, rng);
  b.o = HCLParams::make(d, d, n, rng);
  b.ffn_up = HCLParams::make(d, 4 * d, n, rng);
  b.ffn_down = HCLParams::make(4 * d, d, n, rng);
  b.ln1 = LayerNormParams::make(d);
  b.ln2 = LayerNormParams::make(d);
  b.heads = heads;
  return b;
}

void DfhcBlock::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".attn.q");
  k.collect(out, prefix + ".attn.k");
  v.collect(out, prefix + ".attn.v");
  o.collect(out, prefix + ".attn.o");
  ln1.collect(out, prefix + ".ln1");
  ffn_up.collect(out, prefix + ".ffn.up");
  ffn_down.collect(out, prefix + ".ffn.down");
  ln2.collect(out, prefix + ".ln2");
}

Tensor hc_attention(const DfhcBlock& block, const Tensor& x, const std::vector<bool>& key_is_pad,
                    AttentionTrace* trace) {
  if (x.rank() != 2 || x.rows() == 0) throw DimensionError("hc_attention: expected a non-empty [T x d] input");
  SoftmaxMask mask;
  const SoftmaxMask* mask_ptr = nullptr;
  if (!key_is_pad.empty()) {
    mask = SoftmaxMask::keys(x.rows(), key_is_pad);
    mask_ptr = &mask;
  }
  Tensor heads = multi_head_attention(hcl_forward(block.q, x), hcl_forward(block.k, x), hcl_forward(block.v, x),
                                      block.heads, mask_ptr, trace);
  return block.ln1(add(x, hcl_forward(block.o, heads)));
}

Tensor hc_ffn(const DfhcBlock& block, const Tensor& x) {
  return block.ln2(add(x, hcl_forward(block.ffn_down, relu(hcl_forward(block.ffn_up, x)))));
}

Tensor dfhc_block_forward(const DfhcBlock& block, const Tensor& x, const std::vector<bool>& key_is_pad) {
  return hc_ffn(block, hc_attention(block, x, key_is_pad));
}

std::vector<bool> pad_positions(std::span<const int> tokens) {
  std::vector<bool> pad(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) pad[i] = tokens[i] == 0;
  return pad;
}

Tensor embed_with_positions(std::span<const int> tokens, const Tensor& embed) {
  if (tokens.empty()) throw DimensionError("encoder: empty token sequence");
  return add(embedding(embed, tokens), sinusoidal_positions(tokens.size(), embed.cols()));
}

Tensor dfhc_encode(std::span<const DfhcBlock> blocks, std::span<const int> tokens, const Tensor& embed,
                   bool mask_pad) {
  Tensor x = embed_with_positions(tokens, embed);
  const std::vector<bool> pad = mask_pad ? pad_positions(tokens) : std::vector<bool>{};
  for (const auto& block : blocks) x = dfhc_block_forward(block, x, pad);
  return x;
}

}  // namespace mtldr
