#pragma once

// Differentiable operations over Tensor. Matrices are rank-2, row-major.
//
// Exact zeros are skipped in matmul inner loops, in both passes. Masked
// attention weights are exactly 0, so this keeps whatever sits in a masked
// row (even inf/NaN) out of every sum it would otherwise touch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "marmot/tensor.hpp"

namespace marmot {

inline constexpr double kMaskSentinel = -std::numeric_limits<double>::infinity();

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

inline std::vector<double>* grad_of(Node& self, std::size_t input) {
  Node& in = *self.inputs[input];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

/// Sum in ascending order, so the result does not depend on the order the
/// terms arrived in.
inline double sorted_sum(std::vector<double>& terms) {
  bool finite = true;
  for (double t : terms) finite = finite && std::isfinite(t);
  if (finite) std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) total += t;
  return total;
}

/// Backward of C = A * B for A [m x k], B [k x n].
inline auto matmul_backward(std::size_t m, std::size_t k, std::size_t n) {
  return [m, k, n](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->values;
    const auto& bv = self.inputs[1]->values;
    if (auto* ga = grad_of(self, 0)) {
      // dA = dC * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += gij * bv[p * n + j];
        }
      }
    }
    if (auto* gb = grad_of(self, 1)) {
      // dB = A^T * dC
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += x * g[i * n + j];
        }
      }
    }
  };
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  return Tensor::from_op("matmul", {m, n}, std::move(out), {a, b}, detail::matmul_backward(m, k, n));
}

/// weights * v for attention. Each output entry sums its nonzero terms in
/// sorted order, so permuting the keys (rows of v with the matching columns
/// of weights) leaves the result bitwise unchanged.
inline Tensor attend(const Tensor& weights, const Tensor& v) {
  detail::require_matrix(weights, "attend");
  detail::require_matrix(v, "attend");
  const std::size_t m = weights.dim(0), k = weights.dim(1), n = v.dim(1);
  if (v.dim(0) != k) {
    throw ShapeError("attend: weights " + shape_str(weights.shape()) + " vs values " +
                     shape_str(v.shape()));
  }
  const auto wv = weights.values();
  const auto vv = v.values();
  std::vector<double> out(m * n, 0.0);
  std::vector<double> terms;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      terms.clear();
      for (std::size_t p = 0; p < k; ++p) {
        const double w = wv[i * k + p];
        if (w != 0.0) terms.push_back(w * vv[p * n + j]);
      }
      out[i * n + j] = detail::sorted_sum(terms);
    }
  }
  return Tensor::from_op("attend", {m, n}, std::move(out), {weights, v}, detail::matmul_backward(m, k, n));
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return Tensor::from_op("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto* ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor::from_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t input = 0; input < 2; ++input) {
      if (auto* g = detail::grad_of(self, input)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

/// a[n x d] + row broadcast of b (any shape holding d values).
inline Tensor add_rowwise(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "add_rowwise");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (b.size() != d) {
    throw ShapeError("add_rowwise: row of width " + std::to_string(d) + " vs bias " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
  return Tensor::from_op("add_rowwise", a.shape(), std::move(out), {a, b},
                         [n, d](detail::Node& self) {
                           if (auto* ga = detail::grad_of(self, 0)) {
                             for (std::size_t i = 0; i < n * d; ++i) (*ga)[i] += self.grad[i];
                           }
                           if (auto* gb = detail::grad_of(self, 1)) {
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < d; ++j)
                                 (*gb)[j] += self.grad[i * d + j];
                           }
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::from_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->values;
    const auto& bv = self.inputs[1]->values;
    if (auto* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += self.grad[i] * bv[i];
    if (auto* gb = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += self.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= s;
  return Tensor::from_op("scale", a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto* ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += s * self.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double x : a.values()) total += x;
  return Tensor::from_op("sum", {1}, {total}, {a}, [](detail::Node& self) {
    auto* ga = detail::grad_of(self, 0);
    for (auto& g : *ga) g += self.grad[0];
  });
}

/// max(0, x); the derivative at exactly 0 is taken as 0.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x = x > 0.0 ? x : 0.0;
  return Tensor::from_op("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto* ga = detail::grad_of(self, 0);
    const auto& in = self.inputs[0]->values;
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] > 0.0) (*ga)[i] += self.grad[i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tensor::from_op("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto* ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
  });
}

struct SoftmaxResult {
  Tensor output;
  // Slices whose entries were all the mask sentinel; they come out as zeros.
  std::size_t empty_slices = 0;
};

/// Softmax along `axis`. Entries equal to kMaskSentinel are left out of the
/// normalizing sum and come out as exactly 0; an all-sentinel slice is all 0.
inline SoftmaxResult softmax_with_info(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  const auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  std::size_t empty = 0;
  std::vector<double> terms;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = kMaskSentinel;
      for (std::size_t k = 0; k < len; ++k) {
        const double v = xv[base + k * inner];
        if (v != kMaskSentinel && v > mx) mx = v;
      }
      if (mx == kMaskSentinel) {
        ++empty;
        continue;
      }
      terms.clear();
      for (std::size_t k = 0; k < len; ++k) {
        const double v = xv[base + k * inner];
        if (v == kMaskSentinel) continue;
        const double e = std::exp(v - mx);
        out[base + k * inner] = e;
        terms.push_back(e);
      }
      const double total = detail::sorted_sum(terms);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  auto t = Tensor::from_op("softmax", shape, std::move(out), {x},
                           [outer, inner, len](detail::Node& self) {
                             auto* gx = detail::grad_of(self, 0);
                             const auto& y = self.values;
                             const auto& g = self.grad;
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t in = 0; in < inner; ++in) {
                                 const std::size_t base = o * len * inner + in;
                                 double dot = 0.0;
                                 for (std::size_t k = 0; k < len; ++k) {
                                   const double yk = y[base + k * inner];
                                   if (yk != 0.0) dot += yk * g[base + k * inner];
                                 }
                                 for (std::size_t k = 0; k < len; ++k) {
                                   const std::size_t idx = base + k * inner;
                                   if (y[idx] != 0.0) (*gx)[idx] += y[idx] * (g[idx] - dot);
                                 }
                               }
                             }
                           });
  return {std::move(t), empty};
}

inline Tensor softmax(const Tensor& x, std::size_t axis) { return softmax_with_info(x, axis).output; }

/// Columns [start, start + count) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_matrix(a, "slice_cols");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (count == 0 || start + count > d) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  }
  const auto av = a.values();
  std::vector<double> out(n * count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * d + start + j];
  return Tensor::from_op("slice_cols", {n, count}, std::move(out), {a},
                         [n, d, start, count](detail::Node& self) {
                           auto* ga = detail::grad_of(self, 0);
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < count; ++j)
                               (*ga)[i * d + start + j] += self.grad[i * count + j];
                         });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t n = parts[0].dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.dim(0) != n) {
      throw ShapeError("concat_cols: row counts differ, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    width += p.dim(1);
  }
  std::vector<double> out(n * width);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t w = p.dim(1);
    const auto pv = p.values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * width + off + j] = pv[i * w + j];
    off += w;
  }
  return Tensor::from_op("concat_cols", {n, width}, std::move(out), parts,
                         [n, width, offsets](detail::Node& self) {
                           for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
                             auto* gp = detail::grad_of(self, pi);
                             if (!gp) continue;
                             const std::size_t w = self.inputs[pi]->shape[1];
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < w; ++j)
                                 (*gp)[i * w + j] += self.grad[i * width + offsets[pi] + j];
                           }
                         });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t d = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.dim(1) != d) {
      throw ShapeError("concat_rows: widths differ, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor::from_op("concat_rows", {rows, d}, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
      const std::size_t count = self.inputs[pi]->values.size();
      if (auto* gp = detail::grad_of(self, pi)) {
        for (std::size_t i = 0; i < count; ++i) (*gp)[i] += self.grad[off + i];
      }
      off += count;
    }
  });
}

/// Rows of `table` picked by `ids` (embedding lookup); gradients scatter-add.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  const auto tv = table.values();
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw BoundsError("gather_rows: index " + std::to_string(idx[i]) + " outside table of " +
                        std::to_string(rows) + " rows");
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = tv[idx[i] * d + j];
  }
  return Tensor::from_op("gather_rows", {idx.size(), d}, std::move(out), {table},
                         [idx, d](detail::Node& self) {
                           auto* gt = detail::grad_of(self, 0);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < d; ++j)
                               (*gt)[idx[i] * d + j] += self.grad[i * d + j];
                         });
}

/// Arithmetic mean of the selected rows, as a 1 x d matrix.
inline Tensor mean_rows(const Tensor& a, std::span<const std::size_t> rows) {
  detail::require_matrix(a, "mean_rows");
  if (rows.empty()) throw ContractError("mean_rows: no rows selected");
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto av = a.values();
  std::vector<double> out(d, 0.0);
  for (auto r : idx) {
    if (r >= n) throw BoundsError("mean_rows: row " + std::to_string(r) + " out of range");
    for (std::size_t j = 0; j < d; ++j) out[j] += av[r * d + j];
  }
  const double inv = 1.0 / static_cast<double>(idx.size());
  for (auto& x : out) x *= inv;
  return Tensor::from_op("mean_rows", {1, d}, std::move(out), {a}, [idx, d, inv](detail::Node& self) {
    auto* ga = detail::grad_of(self, 0);
    for (auto r : idx)
      for (std::size_t j = 0; j < d; ++j) (*ga)[r * d + j] += inv * self.grad[j];
  });
}

/// Per-row normalization: (x - mean) / sqrt(var + eps), then gamma * . + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: feature width " + std::to_string(d) + " vs gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: epsilon must be positive");
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> xhat(n * d), inv_std(n), out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xv[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xv[i * d + j] - mean) * inv_std[i];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }
  }
  return Tensor::from_op(
      "layer_norm", {n, d}, std::move(out), {x, gamma, beta},
      [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.grad;
        const auto& gv = self.inputs[1]->values;
        if (auto* ggamma = detail::grad_of(self, 1))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) (*ggamma)[j] += g[i * d + j] * xhat[i * d + j];
        if (auto* gbeta = detail::grad_of(self, 2))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) (*gbeta)[j] += g[i * d + j];
        if (auto* gx = detail::grad_of(self, 0)) {
          const double dd = static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[i * d + j] * gv[j];
              s1 += dxh;
              s2 += dxh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[i * d + j] * gv[j];
              (*gx)[i * d + j] += inv_std[i] / dd * (dd * dxh - s1 - xhat[i * d + j] * s2);
            }
          }
        }
      });
}

/// -log softmax(logits)[label], computed through log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const auto lv = logits.values();
  if (label >= lv.size()) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside " +
                        std::to_string(lv.size()) + " classes");
  }
  double mx = lv[0];
  for (double v : lv) mx = std::max(mx, v);
  double total = 0.0;
  for (double v : lv) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  std::vector<double> probs(lv.size());
  for (std::size_t i = 0; i < lv.size(); ++i) probs[i] = std::exp(lv[i] - lse);
  return Tensor::from_op("cross_entropy", {1}, {lse - lv[label]}, {logits},
                         [label, probs = std::move(probs)](detail::Node& self) {
                           auto* gl = detail::grad_of(self, 0);
                           for (std::size_t i = 0; i < probs.size(); ++i)
                             (*gl)[i] += self.grad[0] * (probs[i] - (i == label ? 1.0 : 0.0));
                         });
}

}  // namespace marmot
