#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchtl/error.hpp"

namespace patchtl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Dense row-major float32 array of dynamic rank.
///
/// Used for images (rank 2), volumes (rank 3) and network activations
/// (rank 4, NCHW). Value semantics; copying copies the buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ValidationError("tensor data size " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
  }
  Tensor(std::initializer_list<std::initializer_list<float>> rows) {
    shape_ = {rows.size(), rows.size() ? rows.begin()->size() : 0};
    for (const auto& r : rows) {
      if (r.size() != shape_[1]) throw ValidationError("ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& vec() noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  float& at(std::size_t s, std::size_t r, std::size_t c) {
    return data_[(s * shape_[1] + r) * shape_[2] + c];
  }
  float at(std::size_t s, std::size_t r, std::size_t c) const {
    return data_[(s * shape_[1] + r) * shape_[2] + c];
  }

  /// Same buffer, new shape of equal element count.
  Tensor reshaped(Shape s) const& {
    if (shape_size(s) != size()) throw ValidationError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }
  Tensor reshaped(Shape s) && {
    if (shape_size(s) != size()) throw ValidationError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    shape_ = std::move(s);
    return std::move(*this);
  }

  /// 2D slab `index` of a rank-3 tensor.
  Tensor slice(std::size_t index) const {
    if (rank() != 3 || index >= shape_[0]) throw ValidationError("slice index out of range");
    const std::size_t n = shape_[1] * shape_[2];
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(index * n);
    return Tensor({shape_[1], shape_[2]}, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n)));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }
  float min() const { return data_.empty() ? 0.0f : *std::min_element(data_.begin(), data_.end()); }
  float max() const { return data_.empty() ? 0.0f : *std::max_element(data_.begin(), data_.end()); }
  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ValidationError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace patchtl
