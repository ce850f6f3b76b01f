#pragma once

// Pre-norm transformer building blocks: multi-head attention, feed-forward,
// encoder and decoder layers, and a layer-addressable encoder stack.

#include <cstddef>
#include <string>
#include <vector>

#include "kgfid/numerics/flops.hpp"
#include "kgfid/numerics/ops.hpp"
#include "kgfid/numerics/parameters.hpp"

namespace kgfid::nn {

using ops::AttentionMask;

struct TransformerDims {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
};

/// Q/K/V/O projections of one attention block (no biases).
struct AttentionParams {
  Tensor wq, wk, wv, wo;
  std::size_t heads = 1;

  static AttentionParams create(ParameterSet& ps, const std::string& prefix, std::size_t hidden,
                                std::size_t heads) {
    if (heads == 0 || hidden % heads != 0) {
      throw ShapeError("head count " + std::to_string(heads) + " must divide hidden width " +
                       std::to_string(hidden));
    }
    return {ps.uniform(prefix + ".wq", {hidden, hidden}, hidden),
            ps.uniform(prefix + ".wk", {hidden, hidden}, hidden),
            ps.uniform(prefix + ".wv", {hidden, hidden}, hidden),
            ps.uniform(prefix + ".wo", {hidden, hidden}, hidden), heads};
  }

  static AttentionParams bind(const ParameterSet& ps, const std::string& prefix, std::size_t heads) {
    return {ps.get(prefix + ".wq"), ps.get(prefix + ".wk"), ps.get(prefix + ".wv"),
            ps.get(prefix + ".wo"), heads};
  }
};

inline Tensor attend(const Tensor& query_in, const Tensor& keys, const Tensor& values, const AttentionParams& p,
                     const AttentionMask& mask) {
  Tensor q;
  {
    KindScope kind(FlopKind::kProjection);
    q = ops::matmul(query_in, p.wq);
  }
  Tensor mixed = ops::attention(q, keys, values, p.heads, mask);
  KindScope kind(FlopKind::kProjection);
  return ops::matmul(mixed, p.wo);
}

/// Full multi-head attention: project q/k/v inputs, attend per head under
/// `mask`, concatenate heads and apply the output projection.
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                   const AttentionParams& p, const AttentionMask& mask) {
  Tensor k, v;
  {
    KindScope kind(FlopKind::kProjection);
    k = ops::matmul(k_in, p.wk);
    v = ops::matmul(v_in, p.wv);
  }
  return attend(q_in, k, v, p, mask);
}

struct LayerNormParams {
  Tensor gain, bias;

  static LayerNormParams create(ParameterSet& ps, const std::string& prefix, std::size_t hidden) {
    return {ps.ones(prefix + ".gain", {hidden}), ps.zeros(prefix + ".bias", {hidden})};
  }
  static LayerNormParams bind(const ParameterSet& ps, const std::string& prefix) {
    return {ps.get(prefix + ".gain"), ps.get(prefix + ".bias")};
  }
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;

  static FeedForwardParams create(ParameterSet& ps, const std::string& prefix, std::size_t hidden,
                                  std::size_t inner) {
    return {ps.uniform(prefix + ".w1", {hidden, inner}, hidden), ps.zeros(prefix + ".b1", {inner}),
            ps.uniform(prefix + ".w2", {inner, hidden}, inner), ps.zeros(prefix + ".b2", {hidden})};
  }
  static FeedForwardParams bind(const ParameterSet& ps, const std::string& prefix) {
    return {ps.get(prefix + ".w1"), ps.get(prefix + ".b1"), ps.get(prefix + ".w2"),
            ps.get(prefix + ".b2")};
  }
  Tensor operator()(const Tensor& x) const {
    KindScope kind(FlopKind::kFeedForward);
    Tensor h = ops::relu(ops::add_row(ops::matmul(x, w1), b1));
    return ops::add_row(ops::matmul(h, w2), b2);
  }
};

struct EncoderLayer {
  LayerNormParams ln_attn, ln_ffn;
  AttentionParams attn;
  FeedForwardParams ffn;

  static EncoderLayer create(ParameterSet& ps, const std::string& prefix, const TransformerDims& d) {
    return {LayerNormParams::create(ps, prefix + ".ln_attn", d.hidden),
            LayerNormParams::create(ps, prefix + ".ln_ffn", d.hidden),
            AttentionParams::create(ps, prefix + ".attn", d.hidden, d.heads),
            FeedForwardParams::create(ps, prefix + ".ffn", d.hidden, d.ffn)};
  }
  static EncoderLayer bind(const ParameterSet& ps, const std::string& prefix, const TransformerDims& d) {
    return {LayerNormParams::bind(ps, prefix + ".ln_attn"), LayerNormParams::bind(ps, prefix + ".ln_ffn"),
            AttentionParams::bind(ps, prefix + ".attn", d.heads),
            FeedForwardParams::bind(ps, prefix + ".ffn")};
  }

  /// x: [batch*T, H]; self-attention stays inside each sequence block.
  Tensor operator()(const Tensor& x, const AttentionMask& mask) const {
    Tensor n1 = ln_attn(x);
    Tensor h = ops::add(x, multi_head_attention(n1, n1, n1, attn, mask));
    return ops::add(h, ffn(ln_ffn(h)));
  }
};

/// Cross-attention reads the encoder memory directly as keys and values;
/// only the decoder side is projected.
struct CrossAttentionParams {
  Tensor wq, wo;
  std::size_t heads = 1;

  static CrossAttentionParams create(ParameterSet& ps, const std::string& prefix, std::size_t hidden,
                                     std::size_t heads) {
    if (heads == 0 || hidden % heads != 0) {
      throw ShapeError("head count " + std::to_string(heads) + " must divide hidden width " +
                       std::to_string(hidden));
    }
    return {ps.uniform(prefix + ".wq", {hidden, hidden}, hidden),
            ps.uniform(prefix + ".wo", {hidden, hidden}, hidden), heads};
  }
  static CrossAttentionParams bind(const ParameterSet& ps, const std::string& prefix, std::size_t heads) {
    return {ps.get(prefix + ".wq"), ps.get(prefix + ".wo"), heads};
  }

  Tensor operator()(const Tensor& x, const Tensor& memory, const AttentionMask& mask) const {
    Tensor q;
    {
      KindScope kind(FlopKind::kProjection);
      q = ops::matmul(x, wq);
    }
    Tensor mixed = ops::attention(q, memory, memory, heads, mask);
    KindScope kind(FlopKind::kProjection);
    return ops::matmul(mixed, wo);
  }
};

struct DecoderLayer {
  LayerNormParams ln_self, ln_cross, ln_ffn;
  AttentionParams self_attn;
  CrossAttentionParams cross_attn;
  FeedForwardParams ffn;

  static DecoderLayer create(ParameterSet& ps, const std::string& prefix, const TransformerDims& d) {
    return {LayerNormParams::create(ps, prefix + ".ln_self", d.hidden),
            LayerNormParams::create(ps, prefix + ".ln_cross", d.hidden),
            LayerNormParams::create(ps, prefix + ".ln_ffn", d.hidden),
            AttentionParams::create(ps, prefix + ".self_attn", d.hidden, d.heads),
            CrossAttentionParams::create(ps, prefix + ".cross_attn", d.hidden, d.heads),
            FeedForwardParams::create(ps, prefix + ".ffn", d.hidden, d.ffn)};
  }
  static DecoderLayer bind(const ParameterSet& ps, const std::string& prefix, const TransformerDims& d) {
    return {LayerNormParams::bind(ps, prefix + ".ln_self"), LayerNormParams::bind(ps, prefix + ".ln_cross"),
            LayerNormParams::bind(ps, prefix + ".ln_ffn"),
            AttentionParams::bind(ps, prefix + ".self_attn", d.heads),
            CrossAttentionParams::bind(ps, prefix + ".cross_attn", d.heads),
            FeedForwardParams::bind(ps, prefix + ".ffn")};
  }

  /// memory: [M, H] encoder states the decoder attends over.
  Tensor operator()(const Tensor& x, const AttentionMask& self_mask, const Tensor& memory,
                    const AttentionMask& cross_mask) const {
    Tensor n1 = ln_self(x);
    Tensor h = ops::add(x, multi_head_attention(n1, n1, n1, self_attn, self_mask));
    h = ops::add(h, cross_attn(ln_cross(h), memory, cross_mask));
    return ops::add(h, ffn(ln_ffn(h)));
  }
};

/// Padded batch of token sequences of a common length.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> ids;         // [batch * length]
  std::vector<std::uint8_t> valid;      // 1 for real tokens, 0 for padding
};

/// Embedding + positional table + L encoder layers + final norm, with each
/// layer individually invokable so encoding can stop and resume.
class EncoderStack {
 public:
  EncoderStack() = default;

  static EncoderStack create(ParameterSet& ps, const std::string& prefix, const Tensor& token_table,
                             std::size_t max_positions, std::size_t layers, const TransformerDims& d) {
    EncoderStack s;
    s.dims_ = d;
    s.tokens_ = token_table;
    s.positions_ = ps.uniform(prefix + ".positions", {max_positions, d.hidden}, d.hidden);
    for (std::size_t l = 0; l < layers; ++l) {
      s.layers_.push_back(EncoderLayer::create(ps, prefix + ".layer" + std::to_string(l), d));
    }
    s.final_ln_ = LayerNormParams::create(ps, prefix + ".ln_final", d.hidden);
    return s;
  }

  static EncoderStack bind(const ParameterSet& ps, const std::string& prefix, const Tensor& token_table,
                           std::size_t layers, const TransformerDims& d) {
    EncoderStack s;
    s.dims_ = d;
    s.tokens_ = token_table;
    s.positions_ = ps.get(prefix + ".positions");
    for (std::size_t l = 0; l < layers; ++l) {
      s.layers_.push_back(EncoderLayer::bind(ps, prefix + ".layer" + std::to_string(l), d));
    }
    s.final_ln_ = LayerNormParams::bind(ps, prefix + ".ln_final");
    return s;
  }

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t max_positions() const { return positions_.dim(0); }
  const TransformerDims& dims() const { return dims_; }

  /// Token + position embeddings, positions restarting at 0 per sequence.
  Tensor embed(const TokenBatch& b) const {
    if (b.length > max_positions()) {
      throw ShapeError("sequence length " + std::to_string(b.length) + " exceeds " +
                       std::to_string(max_positions()) + " positions");
    }
    std::vector<std::size_t> pos(b.batch * b.length);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % b.length;
    return ops::add(ops::embedding(tokens_, b.ids), ops::embedding(positions_, pos));
  }

  static AttentionMask mask_for(const TokenBatch& b) {
    return AttentionMask::key_padding(b.batch, b.length, b.valid);
  }

  /// Applies layers [from, to) (0-based) to x.
  Tensor run_layers(Tensor x, const AttentionMask& mask, std::size_t from, std::size_t to) const {
    if (from > to || to > layers_.size()) {
      throw ArgumentError("encoder layer range [" + std::to_string(from) + "," + std::to_string(to) +
                          ") outside 0.." + std::to_string(layers_.size()));
    }
    for (std::size_t l = from; l < to; ++l) x = layers_[l](x, mask);
    return x;
  }

  Tensor finalize(const Tensor& x) const { return final_ln_(x); }

  /// Whole stack in one pass.
  Tensor encode(const TokenBatch& b) const {
    return finalize(run_layers(embed(b), mask_for(b), 0, layers_.size()));
  }

 private:
  TransformerDims dims_;
  Tensor tokens_;
  Tensor positions_;
  std::vector<EncoderLayer> layers_;
  LayerNormParams final_ln_;
};

}  // namespace kgfid::nn
