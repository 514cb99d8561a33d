#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "marmot/ops.hpp"

namespace marmot {

/// allowed(i, j) == true means query i may attend to key j.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask all(std::size_t rows, std::size_t cols, bool value = true) {
    return {rows, cols, std::vector<std::uint8_t>(rows * cols, value ? 1 : 0)};
  }

  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allowed[i * cols + j] = v ? 1 : 0; }

  bool operator==(const AttentionMask&) const = default;
};

/// Replaces disallowed scores with the mask sentinel. Gradient flows only
/// through allowed entries.
inline Tensor apply_mask(const Tensor& scores, const AttentionMask& mask) {
  detail::require_matrix(scores, "apply_mask");
  if (scores.dim(0) != mask.rows || scores.dim(1) != mask.cols) {
    throw ShapeError("apply_mask: scores " + shape_str(scores.shape()) + " vs mask [" +
                     std::to_string(mask.rows) + "x" + std::to_string(mask.cols) + "]");
  }
  std::vector<double> out(scores.values().begin(), scores.values().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask.allowed[i]) out[i] = kMaskSentinel;
  return Tensor::from_op("apply_mask", scores.shape(), std::move(out), {scores},
                         [allowed = mask.allowed](detail::Node& self) {
                           auto* g = detail::grad_of(self, 0);
                           for (std::size_t i = 0; i < allowed.size(); ++i)
                             if (allowed[i]) (*g)[i] += self.grad[i];
                         });
}

struct AttentionOutput {
  Tensor values;   // n_q x d_head
  Tensor weights;  // n_q x n_k, row-stochastic over allowed keys
};

/// softmax(Q K^T / sqrt(d_head), masked) V.
inline AttentionOutput scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const AttentionMask& mask) {
  detail::require_matrix(q, "scaled_dot_attention");
  detail::require_matrix(k, "scaled_dot_attention");
  detail::require_matrix(v, "scaled_dot_attention");
  const std::size_t d_head = q.dim(1);
  if (d_head == 0) throw ShapeError("scaled_dot_attention: d_head must be positive");
  if (k.dim(1) != d_head || v.dim(0) != k.dim(0)) {
    throw ShapeError("scaled_dot_attention: Q " + shape_str(q.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()) + " are inconsistent");
  }
  if (mask.rows != q.dim(0) || mask.cols != k.dim(0)) {
    throw ShapeError("scaled_dot_attention: mask [" + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + "] does not match " + std::to_string(q.dim(0)) +
                     " queries and " + std::to_string(k.dim(0)) + " keys");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  auto scores = scale(matmul(q, transpose(k)), inv_sqrt);
  auto weights = softmax(apply_mask(scores, mask), 1);
  auto out = attend(weights, v);
  return {std::move(out), std::move(weights)};
}

/// Per-head projections W_q, W_k, W_v (d x d_head each) and the output
/// combination W_o ((heads * d_head) x d).
struct MultiHeadParams {
  std::vector<Tensor> w_q, w_k, w_v;
  Tensor w_o;

  std::size_t heads() const { return w_q.size(); }
  std::size_t model_dim() const { return w_o.dim(1); }
  std::size_t head_dim() const { return w_q.front().dim(1); }

  static MultiHeadParams random(std::size_t d, std::size_t heads, Rng& rng, double stddev) {
    if (heads == 0 || d % heads != 0) {
      throw ContractError("model width " + std::to_string(d) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    MultiHeadParams p;
    for (std::size_t h = 0; h < heads; ++h) {
      p.w_q.push_back(Tensor::randn({d, dh}, rng, stddev, true));
      p.w_k.push_back(Tensor::randn({d, dh}, rng, stddev, true));
      p.w_v.push_back(Tensor::randn({d, dh}, rng, stddev, true));
    }
    p.w_o = Tensor::randn({heads * dh, d}, rng, stddev, true);
    return p;
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    for (std::size_t h = 0; h < heads(); ++h) {
      const auto tag = prefix + ".head" + std::to_string(h);
      f(tag + ".w_q", w_q[h]);
      f(tag + ".w_k", w_k[h]);
      f(tag + ".w_v", w_v[h]);
    }
    f(prefix + ".w_o", w_o);
  }
};

/// Multi-head attention; queries from x_q, keys and values from x_kv.
/// Self-attention passes the same tensor twice. Per-head weight matrices are
/// appended to `weights_out` when it is non-null.
inline Tensor multi_head(const Tensor& x_q, const Tensor& x_kv, const MultiHeadParams& params,
                         const AttentionMask& mask, std::vector<Tensor>* weights_out = nullptr) {
  detail::require_matrix(x_q, "multi_head");
  detail::require_matrix(x_kv, "multi_head");
  const std::size_t d = params.model_dim();
  if (x_q.dim(1) != d || x_kv.dim(1) != d || params.w_q.front().dim(0) != d) {
    throw ShapeError("multi_head: inputs " + shape_str(x_q.shape()) + " / " +
                     shape_str(x_kv.shape()) + " vs model width " + std::to_string(d));
  }
  std::vector<Tensor> heads;
  heads.reserve(params.heads());
  for (std::size_t h = 0; h < params.heads(); ++h) {
    auto res = scaled_dot_attention(matmul(x_q, params.w_q[h]), matmul(x_kv, params.w_k[h]),
                                    matmul(x_kv, params.w_v[h]), mask);
    if (weights_out) weights_out->push_back(res.weights);
    heads.push_back(std::move(res.values));
  }
  auto joined = heads.size() == 1 ? heads.front() : concat_cols(heads);
  return matmul(joined, params.w_o);
}

/// allowed(i, j) = present(i) && present(j).
inline AttentionMask build_fusion_mask(std::span<const std::uint8_t> present) {
  const std::size_t n = present.size();
  AttentionMask mask = AttentionMask::all(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask.set(i, j, present[i] && present[j]);
  return mask;
}

enum class TokenType : std::size_t { text = 0, caption = 1, image = 2 };
inline constexpr std::size_t kTokenTypes = 3;

/// Learned token, absolute position, and token-type tables.
struct EmbeddingTables {
  Tensor token;       // vocab x d
  Tensor position;    // max_len x d
  Tensor token_type;  // 3 x d

  std::size_t vocab() const { return token.dim(0); }
  std::size_t max_len() const { return position.dim(0); }
  std::size_t model_dim() const { return token.dim(1); }

  static EmbeddingTables random(std::size_t vocab, std::size_t max_len, std::size_t d, Rng& rng,
                                double stddev) {
    return {Tensor::randn({vocab, d}, rng, stddev, true),
            Tensor::randn({max_len, d}, rng, stddev, true),
            Tensor::randn({kTokenTypes, d}, rng, stddev, true)};
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".token", token);
    f(prefix + ".position", position);
    f(prefix + ".token_type", token_type);
  }
};

/// Row i = token[ids[i]] + position[positions[i]] + token_type[types[i]].
inline Tensor embed(std::span<const std::size_t> token_ids, std::span<const std::size_t> types,
                    std::span<const std::size_t> positions, const EmbeddingTables& tables) {
  if (token_ids.size() != types.size() || token_ids.size() != positions.size()) {
    throw ShapeError("embed: " + std::to_string(token_ids.size()) + " ids, " +
                     std::to_string(types.size()) + " types, " +
                     std::to_string(positions.size()) + " positions");
  }
  return add(add(gather_rows(tables.token, token_ids), gather_rows(tables.position, positions)),
             gather_rows(tables.token_type, types));
}

/// Positions restarting at 0 for each segment: {3, 2} -> 0 1 2 0 1.
inline std::vector<std::size_t> segment_positions(std::span<const std::size_t> segment_lengths) {
  std::vector<std::size_t> out;
  for (auto len : segment_lengths)
    for (std::size_t p = 0; p < len; ++p) out.push_back(p);
  return out;
}

}  // namespace marmot
