#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "patchtl/error.hpp"

namespace patchtl {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline void check_scored(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ValidationError("scores/labels length mismatch: " + std::to_string(scores.size()) + " vs " +
                          std::to_string(labels.size()));
  if (scores.empty()) throw ValidationError("no scores to evaluate");
  for (int y : labels)
    if (y != 0 && y != 1) throw ValidationError("labels must be 0 or 1");
}

/// Positive iff score >= t.
inline ConfusionCounts confusion_at(std::span<const double> scores, std::span<const int> labels, double t) {
  check_scored(scores, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pos = scores[i] >= t;
    if (labels[i]) (pos ? c.tp : c.fn)++;
    else (pos ? c.fp : c.tn)++;
  }
  return c;
}

/// A rate is nullopt when its denominator is zero.
struct Rates {
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

inline Rates sensitivity_specificity(const ConfusionCounts& c) {
  Rates r;
  if (c.tp + c.fn > 0) r.sensitivity = double(c.tp) / double(c.tp + c.fn);
  if (c.tn + c.fp > 0) r.specificity = double(c.tn) / double(c.tn + c.fp);
  return r;
}

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), from (0,0) to (1,1)
  std::vector<double> thresholds;                 // threshold producing each point (+inf first)
  double auc = 0.0;
};

/// Sweeps every distinct score as threshold from high to low. Tied scores move
/// diagonally, which is what makes the trapezoid equal the Mann-Whitney
/// statistic with ties counted half.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels);
  std::size_t npos = 0;
  for (int y : labels) npos += std::size_t(y);
  const std::size_t nneg = labels.size() - npos;
  if (npos == 0 || nneg == 0) throw UndefinedAucError("AUC undefined: only one class present");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.emplace_back(0.0, 0.0);
  roc.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::size_t tp = 0, fp = 0;
  // Integrate in counts to keep the sum exact, then divide once.
  double area2 = 0.0;  // 2 * sum of trapezoids in count units
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const std::size_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? tp : fp)++;
    area2 += double(fp - fp0) * double(tp + tp0);
    roc.points.emplace_back(double(fp) / double(nneg), double(tp) / double(npos));
    roc.thresholds.push_back(s);
  }
  roc.auc = area2 / (2.0 * double(npos) * double(nneg));
  return roc;
}

/// O(n^2) Mann-Whitney statistic, P(s+ > s-) + 0.5 P(s+ == s-).
inline double pairwise_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels);
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  if (pairs == 0) throw UndefinedAucError("AUC undefined: only one class present");
  return wins / double(pairs);
}

struct OperatingPoint {
  double threshold = 0.5;
  Rates rates;
  ConfusionCounts counts;
};

struct EvalReport {
  double auc = 0.0;
  std::vector<OperatingPoint> operating_points;
  std::vector<std::pair<double, double>> roc;
};

inline EvalReport evaluate(std::span<const double> scores, std::span<const int> labels,
                           const std::vector<double>& thresholds = {0.5}) {
  const auto roc = roc_auc(scores, labels);
  EvalReport r{roc.auc, {}, roc.points};
  for (double t : thresholds) {
    const auto c = confusion_at(scores, labels, t);
    r.operating_points.push_back({t, sensitivity_specificity(c), c});
  }
  return r;
}

inline nlohmann::json rate_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& op : r.operating_points)
    ops.push_back({{"t", op.threshold},
                   {"sens", rate_json(op.rates.sensitivity)},
                   {"spec", rate_json(op.rates.specificity)},
                   {"tp", op.counts.tp},
                   {"fp", op.counts.fp},
                   {"tn", op.counts.tn},
                   {"fn", op.counts.fn}});
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& [x, y] : r.roc) roc.push_back({x, y});
  return {{"auc", r.auc}, {"operating_points", ops}, {"roc", roc}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.auc = j.at("auc").get<double>();
  for (const auto& op : j.at("operating_points")) {
    OperatingPoint p;
    p.threshold = op.at("t").get<double>();
    if (!op.at("sens").is_null()) p.rates.sensitivity = op["sens"].get<double>();
    if (!op.at("spec").is_null()) p.rates.specificity = op["spec"].get<double>();
    p.counts = {op.at("tp").get<std::size_t>(), op.at("fp").get<std::size_t>(), op.at("tn").get<std::size_t>(),
                op.at("fn").get<std::size_t>()};
    r.operating_points.push_back(p);
  }
  for (const auto& pt : j.at("roc")) r.roc.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
  return r;
}

}  // namespace patchtl
