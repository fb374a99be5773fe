// SPDX-License-Identifier: Apache-2.0
#include "mtldr/nn.hpp"

#include <cmath>

namespace mtldr {

Tensor init_normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor init_constant(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng) {
  return Linear{init_normal({in, out}, rng), init_constant({out}, 0.0)};
}

Tensor Linear::operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNormParams LayerNormParams::make(std::size_t width) {
  return LayerNormParams{init_constant({width}, 1.0), init_constant({width}, 0.0)};
}

void LayerNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const SoftmaxMask* mask, AttentionTrace* trace) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()) + " disagree");
  }
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : slice_cols(q, h * dk, dk);
    Tensor kh = heads == 1 ? k : slice_cols(k, h * dk, dk);
    Tensor vh = heads == 1 ? v : slice_cols(v, h * dk, dk);
    Tensor probs = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), mask);
    if (trace != nullptr) trace->heads.push_back(probs);
    outs.push_back(matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

DenseAttention DenseAttention::make(std::size_t d, std::size_t heads, Rng& rng) {
  DenseAttention a;
  a.q = Linear::make(d, d, rng);
  a.k = Linear::make(d, d, rng);
  a.v = Linear::make(d, d, rng);
  a.o = Linear::make(d, d, rng);
  a.heads = heads;
  return a;
}

Tensor DenseAttention::operator()(const Tensor& x_query, const Tensor& x_kv, const SoftmaxMask* mask,
                                  AttentionTrace* trace) const {
  return o(multi_head_attention(q(x_query), k(x_kv), v(x_kv), heads, mask, trace));
}

void DenseAttention::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

FeedForward FeedForward::make(std::size_t d, std::size_t inner, Rng& rng) {
  return FeedForward{Linear::make(d, inner, rng), Linear::make(inner, d, rng)};
}

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

DenseEncoderBlock DenseEncoderBlock::make(std::size_t d, std::size_t heads, Rng& rng) {
  DenseEncoderBlock b;
  b.attn = DenseAttention::make(d, heads, rng);
  b.ln1 = LayerNormParams::make(d);
  b.ffn = FeedForward::make(d, 4 * d, rng);
  b.ln2 = LayerNormParams::make(d);
  return b;
}

Tensor DenseEncoderBlock::operator()(const Tensor& x, const SoftmaxMask* mask) const {
  Tensor h = ln1(add(x, attn(x, x, mask)));
  return ln2(add(h, ffn(h)));
}

void DenseEncoderBlock::collect(ParamList& out, const std::string& prefix) const {
  attn.collect(out, prefix + ".attn");
  ln1.collect(out, prefix + ".ln1");
  ffn.collect(out, prefix + ".ffn");
  ln2.collect(out, prefix + ".ln2");
}

Tensor sinusoidal_positions(std::size_t positions, std::size_t d) {
  Tensor pe({positions, d});
  auto data = pe.mutable_data();
  for (std::size_t pos = 0; pos < positions; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      data[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) data[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

}  // namespace mtldr
