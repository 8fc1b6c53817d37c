#pragma once

// Minimal CPU layer set with hand-written backward passes.
// Activations are NCHW float tensors; dense layers see (N, features).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "patchtl/rng.hpp"
#include "patchtl/tensor.hpp"

namespace patchtl::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<MatRM>;
using CMapMat = Eigen::Map<const MatRM>;
using MapVec = Eigen::Map<Eigen::VectorXf>;
using CMapVec = Eigen::Map<const Eigen::VectorXf>;

enum class Mode { kTrain, kEval };

/// A trainable tensor with its gradient and Adam moments.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
  bool decay = true;  // kernels take the L2 penalty, biases and norm affines do not
  bool frozen = false;

  Param() = default;
  // Gradient and optimizer state are allocated on first use, so shape-only
  // models (e.g. full-size VGG16 introspection) stay cheap.
  Param(std::string n, Shape s, bool decays) : name(std::move(n)), value(std::move(s)), decay(decays) {}
  void zero_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    else std::fill(grad.vec().begin(), grad.vec().end(), 0.0f);
  }
  void ensure_moments() {
    if (m.size() != value.size()) m = Tensor(value.shape());
    if (v.size() != value.size()) v = Tensor(value.shape());
  }
};

/// Non-trainable persistent state (batch-norm running statistics).
struct Buffer {
  std::string name;
  Tensor* value;
};

class BatchNorm;

/// One parameterized layer in the canonical input->output enumeration
/// used by freezing: a conv or dense layer plus any normalization that
/// follows it.
struct Unit {
  std::string name;
  std::vector<Param*> params;
  BatchNorm* norm = nullptr;
  bool head = false;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Accumulates parameter gradients; returns d(loss)/d(input) when
  /// `need_input_grad`, otherwise an empty tensor.
  virtual Tensor backward(const Tensor& grad_out, bool need_input_grad) = 0;
  /// Per-sample output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual void collect_units(std::vector<Unit>&) {}
  virtual void collect_buffers(std::vector<Buffer>&) {}
  virtual void initialize(std::uint64_t) {}
};

namespace detail {

inline float he_std(std::size_t fan_in) { return std::sqrt(2.0f / static_cast<float>(fan_in)); }

inline void fill_normal(Tensor& t, std::uint64_t seed, float sd) {
  Rng rng(seed);
  for (auto& v : t.vec()) v = static_cast<float>(rng.normal() * sd);
}

}  // namespace detail

class BatchNorm {
 public:
  BatchNorm(const std::string& prefix, std::size_t channels)
      : gamma_(prefix + "/bn_gamma", {channels}, false),
        beta_(prefix + "/bn_beta", {channels}, false),
        running_mean_({channels}, 0.0f),
        running_var_({channels}, 1.0f),
        mean_name_(prefix + "/bn_mean"),
        var_name_(prefix + "/bn_var") {
    std::fill(gamma_.value.vec().begin(), gamma_.value.vec().end(), 1.0f);
  }

  /// When set, training-mode forward uses running statistics and leaves them untouched.
  void set_use_running_stats(bool v) { use_running_ = v; }
  bool use_running_stats() const { return use_running_; }

  void forward_inplace(Tensor& y, Mode mode) {
    const std::size_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
    const bool batch_stats = mode == Mode::kTrain && !use_running_;
    mean_.assign(c, 0.0f);
    inv_std_.assign(c, 0.0f);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu, var;
      if (batch_stats) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const float* p = y.data() + (i * c + ch) * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            s += p[k];
            s2 += double(p[k]) * p[k];
          }
        }
        const double cnt = double(n * hw);
        mu = s / cnt;
        var = std::max(0.0, s2 / cnt - mu * mu);
        running_mean_[ch] = static_cast<float>(kMomentum * running_mean_[ch] + (1 - kMomentum) * mu);
        running_var_[ch] = static_cast<float>(kMomentum * running_var_[ch] + (1 - kMomentum) * var);
      } else {
        mu = running_mean_[ch];
        var = running_var_[ch];
      }
      mean_[ch] = static_cast<float>(mu);
      inv_std_[ch] = static_cast<float>(1.0 / std::sqrt(var + kEps));
    }
    batch_stats_used_ = batch_stats;
    xhat_ = y;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        float* p = y.data() + (i * c + ch) * hw;
        float* xh = xhat_.data() + (i * c + ch) * hw;
        const float g = gamma_.value[ch], b = beta_.value[ch];
        for (std::size_t k = 0; k < hw; ++k) {
          xh[k] = (p[k] - mean_[ch]) * inv_std_[ch];
          p[k] = g * xh[k] + b;
        }
      }
  }

  /// In-place: grad w.r.t. normalized output becomes grad w.r.t. pre-norm input.
  void backward_inplace(Tensor& g, bool need_input_grad) {
    const std::size_t n = g.dim(0), c = g.dim(1), hw = g.dim(2) * g.dim(3);
    const double cnt = double(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const float* gp = g.data() + (i * c + ch) * hw;
        const float* xh = xhat_.data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          sg += gp[k];
          sgx += double(gp[k]) * xh[k];
        }
      }
      if (!gamma_.frozen) {
        gamma_.grad[ch] += static_cast<float>(sgx);
        beta_.grad[ch] += static_cast<float>(sg);
      }
      if (!need_input_grad) continue;
      const float gm = gamma_.value[ch] * inv_std_[ch];
      for (std::size_t i = 0; i < n; ++i) {
        float* gp = g.data() + (i * c + ch) * hw;
        const float* xh = xhat_.data() + (i * c + ch) * hw;
        if (batch_stats_used_) {
          const float a = static_cast<float>(sg / cnt), b = static_cast<float>(sgx / cnt);
          for (std::size_t k = 0; k < hw; ++k) gp[k] = gm * (gp[k] - a - xh[k] * b);
        } else {
          for (std::size_t k = 0; k < hw; ++k) gp[k] = gm * gp[k];
        }
      }
    }
  }

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  void collect_buffers(std::vector<Buffer>& out) {
    out.push_back({mean_name_, &running_mean_});
    out.push_back({var_name_, &running_var_});
  }

 private:
  static constexpr double kMomentum = 0.9;
  static constexpr double kEps = 1e-5;
  Param gamma_, beta_;
  Tensor running_mean_, running_var_;
  std::string mean_name_, var_name_;
  std::vector<float> mean_, inv_std_;
  Tensor xhat_;
  bool use_running_ = false;
  bool batch_stats_used_ = false;
};

/// 2D convolution (square kernel, zero padding) with optional batch norm.
class Conv2D : public Layer {
 public:
  Conv2D(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
         std::size_t pad, bool batch_norm, bool head = false)
      : name_(std::move(name)),
        cin_(cin),
        cout_(cout),
        k_(kernel),
        stride_(stride),
        pad_(pad),
        head_(head),
        weight_(name_ + "/kernel", {cout, cin * kernel * kernel}, true),
        bias_(name_ + "/bias", {cout}, false) {
    if (batch_norm) bn_ = std::make_unique<BatchNorm>(name_, cout);
  }

  const std::string& name() const { return name_; }

  Shape output_shape(const Shape& in) const override {
    return {cout_, out_dim(in.at(1)), out_dim(in.at(2))};
  }

  void initialize(std::uint64_t seed) override {
    detail::fill_normal(weight_.value, derive_seed(seed, weight_.name), detail::he_std(cin_ * k_ * k_));
    std::fill(bias_.value.vec().begin(), bias_.value.vec().end(), 0.0f);
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    if (x.rank() != 4 || x.dim(1) != cin_)
      throw ValidationError(name_ + ": expected input (N," + std::to_string(cin_) + ",H,W), got " +
                            shape_str(x.shape()));
    input_ = x;
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = out_dim(h), wo = out_dim(w), p = ho * wo, kk = cin_ * k_ * k_;
    Tensor y({n, cout_, ho, wo});
    CMapMat wmat(weight_.value.data(), cout_, kk);
    CMapVec bvec(bias_.value.data(), cout_);
    const std::size_t chunk = images_per_chunk(kk, p, n);
    for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, n - n0);
      im2col_batch(x, n0, nb, h, w, ho, wo);
      CMapMat cols(cols_.data(), kk, nb * p);
      out_.resize(cout_, nb * p);
      out_.noalias() = wmat * cols;
      for (std::size_t i = 0; i < nb; ++i) {
        MapMat yi(y.data() + (n0 + i) * cout_ * p, cout_, p);
        yi = out_.middleCols(i * p, p);
        yi.colwise() += bvec;
      }
    }
    if (bn_) bn_->forward_inplace(y, mode);
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool need_input_grad) override {
    Tensor g = grad_out;
    const bool own_frozen = weight_.frozen;
    if (bn_) bn_->backward_inplace(g, !own_frozen || need_input_grad);
    const std::size_t n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
    const std::size_t ho = out_dim(h), wo = out_dim(w), p = ho * wo, kk = cin_ * k_ * k_;
    Tensor dx;
    if (need_input_grad) dx = Tensor(input_.shape());
    if (own_frozen && !need_input_grad) return dx;
    CMapMat wmat(weight_.value.data(), cout_, kk);
    MapMat dw(weight_.grad.data(), cout_, kk);
    MapVec db(bias_.grad.data(), cout_);
    const std::size_t chunk = images_per_chunk(kk, p, n);
    MatRM gy;
    MatRM dcols;
    for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, n - n0);
      gy.resize(cout_, nb * p);
      for (std::size_t i = 0; i < nb; ++i)
        gy.middleCols(i * p, p) = CMapMat(g.data() + (n0 + i) * cout_ * p, cout_, p);
      if (!own_frozen) {
        im2col_batch(input_, n0, nb, h, w, ho, wo);
        CMapMat cols(cols_.data(), kk, nb * p);
        dw.noalias() += gy * cols.transpose();
        db += gy.rowwise().sum();
      }
      if (need_input_grad) {
        dcols.noalias() = wmat.transpose() * gy;
        col2im_batch(dcols, dx, n0, nb, h, w, ho, wo);
      }
    }
    return dx;
  }

  void collect_units(std::vector<Unit>& out) override {
    Unit u{name_, {&weight_, &bias_}, bn_.get(), head_};
    if (bn_) {
      u.params.push_back(&bn_->gamma());
      u.params.push_back(&bn_->beta());
    }
    out.push_back(std::move(u));
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    if (bn_) bn_->collect_buffers(out);
  }

 private:
  std::size_t out_dim(std::size_t d) const { return (d + 2 * pad_ - k_) / stride_ + 1; }

  static std::size_t images_per_chunk(std::size_t kk, std::size_t p, std::size_t n) {
    constexpr std::size_t kMaxColFloats = std::size_t{1} << 24;
    return std::clamp<std::size_t>(kMaxColFloats / std::max<std::size_t>(1, kk * p), 1, n);
  }

  void im2col_batch(const Tensor& x, std::size_t n0, std::size_t nb, std::size_t h, std::size_t w,
                    std::size_t ho, std::size_t wo) {
    const std::size_t p = ho * wo, ld = nb * p, kk = cin_ * k_ * k_;
    cols_.resize(kk * ld);
    for (std::size_t i = 0; i < nb; ++i) {
      const float* img = x.data() + (n0 + i) * cin_ * h * w;
      for (std::size_t c = 0; c < cin_; ++c)
        for (std::size_t ky = 0; ky < k_; ++ky)
          for (std::size_t kx = 0; kx < k_; ++kx) {
            float* row = cols_.data() + ((c * k_ + ky) * k_ + kx) * ld + i * p;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = long(oy * stride_ + ky) - long(pad_);
              float* dst = row + oy * wo;
              if (iy < 0 || iy >= long(h)) {
                std::fill(dst, dst + wo, 0.0f);
                continue;
              }
              const float* src = img + (c * h + std::size_t(iy)) * w;
              if (stride_ == 1) {
                const long shift = long(kx) - long(pad_);
                const long lo = std::max(0L, -shift), hi = std::min(long(wo), long(w) - shift);
                std::fill(dst, dst + std::max(0L, lo), 0.0f);
                if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
                std::fill(dst + std::max(lo, hi), dst + wo, 0.0f);
                continue;
              }
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = long(ox * stride_ + kx) - long(pad_);
                dst[ox] = (ix < 0 || ix >= long(w)) ? 0.0f : src[ix];
              }
            }
          }
    }
  }

  void col2im_batch(const MatRM& dcols, Tensor& dx, std::size_t n0, std::size_t nb, std::size_t h,
                    std::size_t w, std::size_t ho, std::size_t wo) const {
    const std::size_t p = ho * wo;
    for (std::size_t i = 0; i < nb; ++i) {
      float* img = dx.data() + (n0 + i) * cin_ * h * w;
      for (std::size_t c = 0; c < cin_; ++c)
        for (std::size_t ky = 0; ky < k_; ++ky)
          for (std::size_t kx = 0; kx < k_; ++kx) {
            const float* row = dcols.data() + ((c * k_ + ky) * k_ + kx) * dcols.cols() + i * p;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = long(oy * stride_ + ky) - long(pad_);
              if (iy < 0 || iy >= long(h)) continue;
              float* dst = img + (c * h + std::size_t(iy)) * w;
              const float* src = row + oy * wo;
              if (stride_ == 1) {
                const long shift = long(kx) - long(pad_);
                const long lo = std::max(0L, -shift), hi = std::min(long(wo), long(w) - shift);
                for (long ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
                continue;
              }
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = long(ox * stride_ + kx) - long(pad_);
                if (ix >= 0 && ix < long(w)) dst[ix] += src[ox];
              }
            }
          }
    }
  }

  std::string name_;
  std::size_t cin_, cout_, k_, stride_, pad_;
  bool head_;
  Param weight_, bias_;
  std::unique_ptr<BatchNorm> bn_;
  Tensor input_;
  std::vector<float> cols_;
  MatRM out_;
};

class ReLU : public Layer {
 public:
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor forward(const Tensor& x, Mode) override {
    Tensor y = x;
    for (auto& v : y.vec()) v = v > 0.0f ? v : 0.0f;
    output_ = y;
    return y;
  }
  Tensor backward(const Tensor& g, bool need_input_grad) override {
    if (!need_input_grad) return {};
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (output_[i] <= 0.0f) dx[i] = 0.0f;
    return dx;
  }

 private:
  Tensor output_;
};

class MaxPool : public Layer {
 public:
  MaxPool(std::size_t kernel, std::size_t stride, std::size_t pad = 0) : k_(kernel), s_(stride), pad_(pad) {}
  Shape output_shape(const Shape& in) const override {
    return {in.at(0), out_dim(in.at(1)), out_dim(in.at(2))};
  }
  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = out_dim(h), wo = out_dim(w);
    Tensor y({n, c, ho, wo});
    argmax_.assign(y.size(), 0);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      const float* src = x.data() + plane * h * w;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_i = 0;
          for (std::size_t ky = 0; ky < k_; ++ky) {
            const long iy = long(oy * s_ + ky) - long(pad_);
            if (iy < 0 || iy >= long(h)) continue;
            for (std::size_t kx = 0; kx < k_; ++kx) {
              const long ix = long(ox * s_ + kx) - long(pad_);
              if (ix < 0 || ix >= long(w)) continue;
              const std::size_t idx = std::size_t(iy) * w + std::size_t(ix);
              if (src[idx] > best) {
                best = src[idx];
                best_i = idx;
              }
            }
          }
          const std::size_t o = (plane * ho + oy) * wo + ox;
          y[o] = best;
          argmax_[o] = plane * h * w + best_i;
        }
    }
    return y;
  }
  Tensor backward(const Tensor& g, bool need_input_grad) override {
    if (!need_input_grad) return {};
    Tensor dx(in_shape_);
    for (std::size_t o = 0; o < g.size(); ++o) dx[argmax_[o]] += g[o];
    return dx;
  }

 private:
  std::size_t out_dim(std::size_t d) const { return (d + 2 * pad_ - k_) / s_ + 1; }
  std::size_t k_, s_, pad_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

class GlobalAvgPool : public Layer {
 public:
  Shape output_shape(const Shape& in) const override { return {in.at(0)}; }
  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y({n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += x[i * hw + k];
      y[i] = static_cast<float>(s / double(hw));
    }
    return y;
  }
  Tensor backward(const Tensor& g, bool need_input_grad) override {
    if (!need_input_grad) return {};
    Tensor dx(in_shape_);
    const std::size_t hw = in_shape_[2] * in_shape_[3];
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t k = 0; k < hw; ++k) dx[i * hw + k] = g[i] / float(hw);
    return dx;
  }

 private:
  Shape in_shape_;
};

class Flatten : public Layer {
 public:
  Shape output_shape(const Shape& in) const override { return {shape_size(in)}; }
  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  Tensor backward(const Tensor& g, bool need_input_grad) override {
    if (!need_input_grad) return {};
    return g.reshaped(in_shape_);
  }

 private:
  Shape in_shape_;
};

class Dense : public Layer {
 public:
  Dense(std::string name, std::size_t in, std::size_t out, bool head = true, bool glorot = false)
      : name_(std::move(name)),
        in_(in),
        out_(out),
        head_(head),
        glorot_(glorot),
        weight_(name_ + "/kernel", {out, in}, true),
        bias_(name_ + "/bias", {out}, false) {}

  Shape output_shape(const Shape& in) const override {
    if (shape_size(in) != in_) throw ValidationError(name_ + ": input features mismatch");
    return {out_};
  }
  void initialize(std::uint64_t seed) override {
    const float sd = glorot_ ? std::sqrt(2.0f / float(in_ + out_)) : detail::he_std(in_);
    detail::fill_normal(weight_.value, derive_seed(seed, weight_.name), sd);
    std::fill(bias_.value.vec().begin(), bias_.value.vec().end(), 0.0f);
  }
  Tensor forward(const Tensor& x, Mode) override {
    if (x.rank() != 2 || x.dim(1) != in_)
      throw ValidationError(name_ + ": expected (N," + std::to_string(in_) + "), got " + shape_str(x.shape()));
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor y({n, out_});
    MapMat ym(y.data(), n, out_);
    ym.noalias() = CMapMat(x.data(), n, in_) * CMapMat(weight_.value.data(), out_, in_).transpose();
    ym.rowwise() += CMapVec(bias_.value.data(), out_).transpose();
    return y;
  }
  Tensor backward(const Tensor& g, bool need_input_grad) override {
    const std::size_t n = input_.dim(0);
    CMapMat gm(g.data(), n, out_);
    if (!weight_.frozen) {
      MapMat(weight_.grad.data(), out_, in_).noalias() += gm.transpose() * CMapMat(input_.data(), n, in_);
      // Plain loop: Eigen's reduction path depends on buffer alignment, which breaks bitwise reruns.
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += g[i * out_ + o];
    }
    if (!need_input_grad) return {};
    Tensor dx({n, in_});
    MapMat(dx.data(), n, in_).noalias() = gm * CMapMat(weight_.value.data(), out_, in_);
    return dx;
  }
  void collect_units(std::vector<Unit>& out) override { out.push_back({name_, {&weight_, &bias_}, nullptr, head_}); }

 private:
  std::string name_;
  std::size_t in_, out_;
  bool head_, glorot_;
  Param weight_, bias_;
  Tensor input_;
};

/// Basic two-conv residual block with optional 1x1 projection shortcut.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride)
      : a_(name + "/conv_a", cin, cout, 3, stride, 1, true),
        b_(name + "/conv_b", cout, cout, 3, 1, 1, true) {
    if (stride != 1 || cin != cout)
      proj_ = std::make_unique<Conv2D>(name + "/shortcut", cin, cout, 1, stride, 0, true);
  }
  Shape output_shape(const Shape& in) const override { return a_.output_shape(in); }
  void initialize(std::uint64_t seed) override {
    a_.initialize(seed);
    b_.initialize(seed);
    if (proj_) proj_->initialize(seed);
  }
  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor h = relu_a_.forward(a_.forward(x, mode), mode);
    Tensor y = b_.forward(h, mode);
    const Tensor sc = proj_ ? proj_->forward(x, mode) : x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
    return relu_out_.forward(y, mode);
  }
  Tensor backward(const Tensor& g, bool need_input_grad) override {
    // Input gradient of the inner branch is needed if conv_a is trainable.
    Tensor gy = relu_out_.backward(g, true);
    const bool a_trainable = !first_param_frozen(a_);
    Tensor gh = b_.backward(gy, a_trainable || need_input_grad);
    Tensor dx;
    if (!gh.empty()) {
      gh = relu_a_.backward(gh, true);
      dx = a_.backward(gh, need_input_grad);
    }
    if (proj_) {
      Tensor dsc = proj_->backward(gy, need_input_grad);
      if (need_input_grad)
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dsc[i];
    } else if (need_input_grad) {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i];
    }
    return need_input_grad ? dx : Tensor{};
  }
  void collect_units(std::vector<Unit>& out) override {
    a_.collect_units(out);
    b_.collect_units(out);
    if (proj_) proj_->collect_units(out);
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    a_.collect_buffers(out);
    b_.collect_buffers(out);
    if (proj_) proj_->collect_buffers(out);
  }

 private:
  static bool first_param_frozen(Conv2D& c) {
    std::vector<Unit> u;
    c.collect_units(u);
    return u.front().params.front()->frozen;
  }
  Conv2D a_, b_;
  std::unique_ptr<Conv2D> proj_;
  ReLU relu_a_, relu_out_;
};

}  // namespace patchtl::nn
