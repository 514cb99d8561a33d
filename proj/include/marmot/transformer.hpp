#pragma once

// Post-norm transformer blocks: sublayer -> residual add -> layer norm.

#include <cstddef>
#include <string>
#include <vector>

#include "marmot/attention.hpp"

namespace marmot {

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double epsilon = 1e-12;

  static LayerNormParams identity(std::size_t d, double eps = 1e-12) {
    return {Tensor::filled({d}, 1.0, true), Tensor::zeros({d}, true), eps};
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm(x, p.gamma, p.beta, p.epsilon);
}

/// relu(x W1 + b1) W2 + b2.
struct FeedForwardParams {
  Tensor w1, b1, w2, b2;

  static FeedForwardParams random(std::size_t d, std::size_t d_ff, Rng& rng, double stddev) {
    return {Tensor::randn({d, d_ff}, rng, stddev, true), Tensor::zeros({d_ff}, true),
            Tensor::randn({d_ff, d}, rng, stddev, true), Tensor::zeros({d}, true)};
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return add_rowwise(matmul(relu(add_rowwise(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

struct EncoderBlockParams {
  MultiHeadParams self_attn;
  LayerNormParams ln1, ln2;
  FeedForwardParams ff;

  static EncoderBlockParams random(std::size_t d, std::size_t heads, std::size_t d_ff, Rng& rng,
                                   double stddev, double eps = 1e-12) {
    EncoderBlockParams p;
    p.self_attn = MultiHeadParams::random(d, heads, rng, stddev);
    p.ln1 = LayerNormParams::identity(d, eps);
    p.ln2 = LayerNormParams::identity(d, eps);
    p.ff = FeedForwardParams::random(d, d_ff, rng, stddev);
    return p;
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    self_attn.for_each(prefix + ".self_attn", f);
    ln1.for_each(prefix + ".ln1", f);
    ff.for_each(prefix + ".ff", f);
    ln2.for_each(prefix + ".ln2", f);
  }
};

struct DecoderBlockParams {
  MultiHeadParams self_attn, cross_attn;
  LayerNormParams ln1, ln2, ln3;
  FeedForwardParams ff;

  static DecoderBlockParams random(std::size_t d, std::size_t heads, std::size_t d_ff, Rng& rng,
                                   double stddev, double eps = 1e-12) {
    DecoderBlockParams p;
    p.self_attn = MultiHeadParams::random(d, heads, rng, stddev);
    p.cross_attn = MultiHeadParams::random(d, heads, rng, stddev);
    p.ln1 = LayerNormParams::identity(d, eps);
    p.ln2 = LayerNormParams::identity(d, eps);
    p.ln3 = LayerNormParams::identity(d, eps);
    p.ff = FeedForwardParams::random(d, d_ff, rng, stddev);
    return p;
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    self_attn.for_each(prefix + ".self_attn", f);
    ln1.for_each(prefix + ".ln1", f);
    cross_attn.for_each(prefix + ".cross_attn", f);
    ln2.for_each(prefix + ".ln2", f);
    ff.for_each(prefix + ".ff", f);
    ln3.for_each(prefix + ".ln3", f);
  }
};

/// Attention weights recorded by one block, one tensor per head.
struct BlockTrace {
  std::vector<Tensor> self_attn;
  std::vector<Tensor> cross_attn;
};

inline Tensor encoder_block(const Tensor& x, const AttentionMask& mask, const EncoderBlockParams& p,
                            BlockTrace* trace = nullptr) {
  auto h = layer_norm(add(x, multi_head(x, x, p.self_attn, mask, trace ? &trace->self_attn : nullptr)),
                      p.ln1);
  return layer_norm(add(h, feed_forward(h, p.ff)), p.ln2);
}

/// Self-attention over x, then cross-attention with queries from x and keys /
/// values from `memory`, then the feedforward; each wrapped in residual + norm.
inline Tensor decoder_block(const Tensor& x, const Tensor& memory, const AttentionMask& self_mask,
                            const AttentionMask& cross_mask, const DecoderBlockParams& p,
                            BlockTrace* trace = nullptr) {
  auto h1 = layer_norm(
      add(x, multi_head(x, x, p.self_attn, self_mask, trace ? &trace->self_attn : nullptr)), p.ln1);
  auto h2 = layer_norm(add(h1, multi_head(h1, memory, p.cross_attn, cross_mask,
                                          trace ? &trace->cross_attn : nullptr)),
                       p.ln2);
  return layer_norm(add(h2, feed_forward(h2, p.ff)), p.ln3);
}

/// Applies the blocks in order. An empty stack returns x unchanged.
inline Tensor encoder_stack(const std::vector<EncoderBlockParams>& blocks, const Tensor& x,
                            const AttentionMask& mask, std::vector<BlockTrace>* traces = nullptr) {
  Tensor h = x;
  for (const auto& block : blocks) {
    BlockTrace* t = nullptr;
    if (traces) t = &traces->emplace_back();
    h = encoder_block(h, mask, block, t);
  }
  return h;
}

inline Tensor decoder_stack(const std::vector<DecoderBlockParams>& blocks, const Tensor& x,
                            const Tensor& memory, const AttentionMask& self_mask,
                            const AttentionMask& cross_mask,
                            std::vector<BlockTrace>* traces = nullptr) {
  Tensor h = x;
  for (const auto& block : blocks) {
    BlockTrace* t = nullptr;
    if (traces) t = &traces->emplace_back();
    h = decoder_block(h, memory, self_mask, cross_mask, block, t);
  }
  return h;
}

}  // namespace marmot
