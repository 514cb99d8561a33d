#pragma once

// Binary-classification metrics. Ratios whose denominator is zero are
// reported as std::nullopt ("undefined") instead of being coerced to 0.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marmot/errors.hpp"

namespace marmot {

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
  std::size_t negatives() const { return tn + fp; }  // N0
  std::size_t positives() const { return tp + fn; }  // N1

  bool operator==(const ConfusionCounts&) const = default;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

struct MetricsReport {
  ConfusionCounts counts;
  std::optional<double> accuracy;
  std::optional<double> precision0, precision1;
  std::optional<double> recall0, recall1;
  std::optional<double> f1_0, f1_1;
  std::optional<double> macro_f1, micro_f1;
  std::vector<RocPoint> roc;
  std::optional<double> auc;
  std::vector<std::string> warnings;
};

namespace detail {

inline void check_binary(std::span<const int> labels, const char* what) {
  for (int y : labels) {
    if (y != 0 && y != 1) {
      throw ContractError(std::string(what) + ": expected 0/1 values, got " + std::to_string(y));
    }
  }
}

inline std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

inline ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) {
    throw ShapeError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw ContractError("confusion: no examples to score");
  detail::check_binary(preds, "confusion");
  detail::check_binary(labels, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] == 1) {
      (preds[i] == 1 ? c.tp : c.fn)++;
    } else {
      (preds[i] == 1 ? c.fp : c.tn)++;
    }
  }
  return c;
}

/// Accuracy, per-class precision / recall / F1, macro and micro F1. An F1 whose
/// precision or recall is undefined is itself undefined and is left out of the
/// macro and micro averages, with a warning.
inline MetricsReport scores(const ConfusionCounts& c, std::size_t n0, std::size_t n1) {
  if (c.negatives() != n0 || c.positives() != n1) {
    throw ContractError("scores: counts imply N0=" + std::to_string(c.negatives()) + ", N1=" +
                        std::to_string(c.positives()) + " but N0=" + std::to_string(n0) +
                        ", N1=" + std::to_string(n1) + " were given");
  }
  MetricsReport r;
  r.counts = c;
  r.accuracy = detail::ratio(c.tp + c.tn, c.total());
  r.precision0 = detail::ratio(c.tn, c.tn + c.fn);
  r.precision1 = detail::ratio(c.tp, c.tp + c.fp);
  r.recall0 = detail::ratio(c.tn, c.tn + c.fp);
  r.recall1 = detail::ratio(c.tp, c.tp + c.fn);

  auto f1 = [](std::optional<double> p, std::optional<double> rc) -> std::optional<double> {
    if (!p || !rc) return std::nullopt;
    if (*p + *rc == 0.0) return 0.0;  // no overlap at all: 2TP / (2TP + FP + FN) = 0
    return 2.0 * (*p * *rc) / (*p + *rc);
  };
  r.f1_0 = f1(r.precision0, r.recall0);
  r.f1_1 = f1(r.precision1, r.recall1);
  if (!r.f1_0) r.warnings.push_back("F1_0 undefined (0/0 precision or recall); excluded from averages");
  if (!r.f1_1) r.warnings.push_back("F1_1 undefined (0/0 precision or recall); excluded from averages");

  const double n = static_cast<double>(n0 + n1);
  if (r.f1_0 && r.f1_1) {
    r.macro_f1 = (*r.f1_0 + *r.f1_1) / 2.0;
    r.micro_f1 = static_cast<double>(n0) / n * *r.f1_0 + static_cast<double>(n1) / n * *r.f1_1;
  } else if (r.f1_0 || r.f1_1) {
    r.macro_f1 = r.f1_0 ? *r.f1_0 : *r.f1_1;
    r.micro_f1 = r.macro_f1;
  }
  return r;
}

namespace detail {

inline void check_scores(std::span<const double> p, std::span<const int> labels, const char* what) {
  if (p.size() != labels.size()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(p.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  }
  check_binary(labels, what);
}

}  // namespace detail

/// ROC points from sweeping the threshold down through the distinct scores.
/// Tied scores cross the threshold together. Starts at (0,0), ends at (1,1).
/// Undefined (nullopt) unless both classes are present.
inline std::optional<std::vector<RocPoint>> roc_curve(std::span<const double> p_positive,
                                                      std::span<const int> labels) {
  detail::check_scores(p_positive, labels, "roc_curve");
  const auto n1 = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n0 = labels.size() - n1;
  if (n0 == 0 || n1 == 0) return std::nullopt;

  std::vector<std::size_t> order(p_positive.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_positive[a] > p_positive[b]; });

  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = p_positive[order[i]];
    while (i < order.size() && p_positive[order[i]] == s) {
      (labels[order[i]] == 1 ? tp : fp)++;
      ++i;
    }
    pts.push_back({static_cast<double>(fp) / static_cast<double>(n0),
                   static_cast<double>(tp) / static_cast<double>(n1)});
  }
  return pts;
}

/// Area under a piecewise-linear curve by the trapezoid rule.
inline double trapezoid_area(std::span<const RocPoint> pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  return area;
}

/// Mann-Whitney probability that a random positive outscores a random
/// negative, ties counting 1/2. Computed through midranks in O(N log N).
inline std::optional<double> auc(std::span<const double> p_positive, std::span<const int> labels) {
  detail::check_scores(p_positive, labels, "auc");
  const std::size_t n = p_positive.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_positive[a] < p_positive[b]; });
  // Sum of doubled midranks of positives keeps every quantity an integer.
  std::size_t n1 = 0, doubled_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && p_positive[order[j]] == p_positive[order[i]]) ++j;
    const std::size_t doubled_mid = i + j + 1;  // 2 * average of 1-based ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        ++n1;
        doubled_rank_sum += doubled_mid;
      }
    }
    i = j;
  }
  const std::size_t n0 = n - n1;
  if (n0 == 0 || n1 == 0) return std::nullopt;
  // 2U = 2R1 - N1 (N1 + 1)
  const std::size_t doubled_u = doubled_rank_sum - n1 * (n1 + 1);
  return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(n1) * static_cast<double>(n0));
}

/// Every metric for a scored set at the given threshold (class 1 iff p >= threshold).
inline MetricsReport evaluate(std::span<const double> p_positive, std::span<const int> labels,
                              double threshold = 0.5) {
  detail::check_scores(p_positive, labels, "evaluate");
  std::vector<int> preds(p_positive.size());
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i] = p_positive[i] >= threshold ? 1 : 0;
  const auto c = confusion(preds, labels);
  auto r = scores(c, c.negatives(), c.positives());
  if (auto roc = roc_curve(p_positive, labels)) {
    r.roc = std::move(*roc);
  } else {
    r.warnings.push_back("only one class present; ROC and AUC undefined");
  }
  r.auc = auc(p_positive, labels);
  return r;
}

}  // namespace marmot
