#pragma once

#include <cmath>
#include <numbers>

#include "patchtl/error.hpp"
#include "patchtl/rng.hpp"
#include "patchtl/tensor.hpp"

namespace patchtl {

struct AugmentConfig {
  bool enabled = false;
  double rotation_deg = 50.0;   // angle ~ U(-rotation_deg, rotation_deg)
  double translate_frac = 0.32; // shift ~ U(-f, f) * dim, per axis
  double vflip_prob = 0.5;

  void validate() const {
    if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0)) throw ValidationError("augment.rotation_deg must be in [0, 180]");
    if (!(translate_frac >= 0.0 && translate_frac < 1.0)) throw ValidationError("augment.translate_frac must be in [0, 1)");
    if (!(vflip_prob >= 0.0 && vflip_prob <= 1.0)) throw ValidationError("augment.vflip_prob must be in [0, 1]");
  }
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

/// One concrete draw of the random transform.
struct AugmentDraw {
  double angle_deg = 0.0;
  long shift_rows = 0;
  long shift_cols = 0;
  bool vflip = false;
};

inline AugmentDraw sample_augment(const AugmentConfig& cfg, std::size_t h, std::size_t w, Rng& rng) {
  AugmentDraw d;
  d.angle_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  d.shift_rows = std::lround(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * double(h));
  d.shift_cols = std::lround(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * double(w));
  d.vflip = rng.bernoulli(cfg.vflip_prob);
  return d;
}

namespace aug_detail {

// Rotation about the image centre; samples outside the source read as 0.
inline void rotate(const float* src, float* dst, std::size_t h, std::size_t w, double angle_deg) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cy = 0.5 * double(h - 1), cx = 0.5 * double(w - 1);
  auto px = [&](long r, long c) -> double {
    return (r < 0 || c < 0 || r >= long(h) || c >= long(w)) ? 0.0 : double(src[std::size_t(r) * w + std::size_t(c)]);
  };
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = double(r) - cy, dx = double(c) - cx;
      const double sy = cy + ca * dy - sa * dx;
      const double sx = cx + sa * dy + ca * dx;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const long y0 = long(fy), x0 = long(fx);
      const double ty = sy - fy, tx = sx - fx;
      const double v = (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
                       ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
      dst[r * w + c] = static_cast<float>(v);
    }
}

inline void shift(const float* src, float* dst, std::size_t h, std::size_t w, long dr, long dc) {
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const long sr = long(r) - dr, sc = long(c) - dc;
      dst[r * w + c] = (sr < 0 || sc < 0 || sr >= long(h) || sc >= long(w)) ? 0.0f : src[std::size_t(sr) * w + std::size_t(sc)];
    }
}

inline void flip_rows(float* img, std::size_t h, std::size_t w) {
  for (std::size_t r = 0; r < h / 2; ++r) std::swap_ranges(img + r * w, img + (r + 1) * w, img + (h - 1 - r) * w);
}

}  // namespace aug_detail

/// Rotation, then translation, then vertical flip. Works on (H,W) or
/// (C,H,W); every channel gets the same draw.
inline Tensor apply_augment(const Tensor& image, const AugmentDraw& d) {
  if (image.rank() != 2 && image.rank() != 3) throw ValidationError("augment expects a 2D or 3D image");
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  const std::size_t channels = image.rank() == 3 ? image.dim(0) : 1;
  Tensor out = image;
  std::vector<float> tmp(h * w);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    float* p = out.data() + ch * h * w;
    if (d.angle_deg != 0.0) {
      aug_detail::rotate(p, tmp.data(), h, w, d.angle_deg);
      std::copy(tmp.begin(), tmp.end(), p);
    }
    if (d.shift_rows != 0 || d.shift_cols != 0) {
      aug_detail::shift(p, tmp.data(), h, w, d.shift_rows, d.shift_cols);
      std::copy(tmp.begin(), tmp.end(), p);
    }
    if (d.vflip) aug_detail::flip_rows(p, h, w);
  }
  return out;
}

inline Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return image;
  cfg.validate();
  if (!image.all_finite()) throw ValidationError("augment: non-finite input");
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  return apply_augment(image, sample_augment(cfg, h, w, rng));
}

}  // namespace patchtl
