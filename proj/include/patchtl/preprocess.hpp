#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "patchtl/error.hpp"
#include "patchtl/tensor.hpp"
#include "patchtl/types.hpp"

namespace patchtl {

/// Bilinear resampling with corner-aligned sampling: output corners map
/// exactly onto input corners.
inline Tensor resample_slice(const Tensor& image, ImageSize target) {
  if (image.rank() != 2 || image.dim(0) < 2 || image.dim(1) < 2)
    throw ValidationError("resample_slice needs a 2D image of at least 2x2, got " + shape_str(image.shape()));
  if (target.h < 2 || target.w < 2) throw ValidationError("resample target must be at least 2x2");
  if (!image.all_finite()) throw ValidationError("resample_slice: non-finite input");
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h == target.h && w == target.w) return image;
  Tensor out({target.h, target.w});
  const double sy = double(h - 1) / double(target.h - 1), sx = double(w - 1) / double(target.w - 1);
  for (std::size_t r = 0; r < target.h; ++r) {
    const double y = double(r) * sy;
    const std::size_t y0 = std::min<std::size_t>(std::size_t(y), h - 2);
    const double fy = y - double(y0);
    for (std::size_t c = 0; c < target.w; ++c) {
      const double x = double(c) * sx;
      const std::size_t x0 = std::min<std::size_t>(std::size_t(x), w - 2);
      const double fx = x - double(x0);
      const double top = (1 - fx) * image.at(y0, x0) + fx * image.at(y0, x0 + 1);
      const double bot = (1 - fx) * image.at(y0 + 1, x0) + fx * image.at(y0 + 1, x0 + 1);
      out.at(r, c) = static_cast<float>((1 - fy) * top + fy * bot);
    }
  }
  return out;
}

/// Nearest-neighbour resampling for binary masks on the same corner-aligned grid.
inline Tensor resample_mask(const Tensor& mask, ImageSize target) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  if (h == target.h && w == target.w) return mask;
  Tensor out({target.h, target.w});
  const double sy = target.h > 1 ? double(h - 1) / double(target.h - 1) : 0.0;
  const double sx = target.w > 1 ? double(w - 1) / double(target.w - 1) : 0.0;
  for (std::size_t r = 0; r < target.h; ++r)
    for (std::size_t c = 0; c < target.w; ++c)
      out.at(r, c) = mask.at(std::size_t(std::lround(double(r) * sy)), std::size_t(std::lround(double(c) * sx)));
  return out;
}

/// Percentile q in [0,100] of ascending `sorted` with linear interpolation
/// between order statistics (rank = q/100 * (n-1)).
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ValidationError("percentile of empty set");
  const double rank = q / 100.0 * double(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (rank - double(lo)) * (sorted[hi] - sorted[lo]);
}

inline double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  return percentile_sorted(values, q);
}

/// Clip to the [p_low, p_high] percentiles, then map the clip range onto [0,1].
/// A degenerate clip range yields all zeros.
inline Tensor normalize_intensity(const Tensor& image, double p_low = 1.0, double p_high = 99.0) {
  if (!(p_low >= 0.0 && p_high <= 100.0 && p_low < p_high))
    throw ValidationError("normalize_intensity: need 0 <= p_low < p_high <= 100");
  if (!image.all_finite()) throw ValidationError("normalize_intensity: non-finite input");
  std::vector<double> v(image.vec().begin(), image.vec().end());
  std::sort(v.begin(), v.end());
  const double lo = percentile_sorted(v, p_low), hi = percentile_sorted(v, p_high);
  Tensor out(image.shape());
  if (!(hi > lo)) return out;
  const double span = hi - lo;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double x = std::clamp(double(image[i]), lo, hi);
    out[i] = static_cast<float>((x - lo) / span);
  }
  return out;
}

/// (H,W) -> (3,H,W) with identical channels.
inline Tensor replicate_channels(const Tensor& image) {
  if (image.rank() != 2) throw ValidationError("replicate_channels expects a single-channel 2D image");
  const std::size_t n = image.size();
  Tensor out({3, image.dim(0), image.dim(1)});
  for (std::size_t c = 0; c < 3; ++c) std::copy(image.vec().begin(), image.vec().end(), out.vec().begin() + std::ptrdiff_t(c * n));
  return out;
}

}  // namespace patchtl
