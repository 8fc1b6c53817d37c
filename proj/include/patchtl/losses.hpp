#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "patchtl/error.hpp"

namespace patchtl {

inline constexpr double kProbEpsilon = 1e-7;

enum class LossKind { kCrossEntropy, kFocal };

struct LossConfig {
  LossKind kind = LossKind::kCrossEntropy;
  double gamma = 2.0;
  double alpha = 0.25;

  void validate() const {
    if (kind != LossKind::kFocal) return;
    if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("focal alpha must lie in (0,1)");
  }
};

inline double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double binary_cross_entropy(double p, int y) {
  p = clamp_prob(p);
  return y == 1 ? -std::log(p) : -std::log(1.0 - p);
}

inline double focal_loss(double p, int y, double gamma = 2.0, double alpha = 0.25) {
  LossConfig{LossKind::kFocal, gamma, alpha}.validate();
  p = clamp_prob(p);
  if (y == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

inline double loss_value(const LossConfig& cfg, double p, int y) {
  return cfg.kind == LossKind::kFocal ? focal_loss(p, y, cfg.gamma, cfg.alpha) : binary_cross_entropy(p, y);
}

/// d(loss)/d(logit) for p = sigmoid(logit). Zero where the probability clamp is active.
inline double loss_logit_grad(const LossConfig& cfg, double logit, int y) {
  const double p = sigmoid(logit);
  if (p <= kProbEpsilon || p >= 1.0 - kProbEpsilon) return 0.0;
  if (cfg.kind == LossKind::kCrossEntropy) return p - double(y);
  const double g = cfg.gamma, a = cfg.alpha;
  if (y == 1) return a * std::pow(1.0 - p, g) * (g * p * std::log(p) - (1.0 - p));
  return -(1.0 - a) * std::pow(p, g) * (g * (1.0 - p) * std::log(1.0 - p) - p);
}

/// Batch mean over paired probabilities and labels.
inline double mean_loss(const LossConfig& cfg, std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size() || probs.empty()) throw ValidationError("loss: bad batch sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) s += loss_value(cfg, probs[i], labels[i]);
  return s / double(probs.size());
}

inline std::string to_string(LossKind k) { return k == LossKind::kFocal ? "FOCAL" : "CE"; }

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "CE") return LossKind::kCrossEntropy;
  if (s == "FOCAL") return LossKind::kFocal;
  throw ConfigError("unknown loss kind '" + s + "' (expected CE or FOCAL)");
}

}  // namespace patchtl
