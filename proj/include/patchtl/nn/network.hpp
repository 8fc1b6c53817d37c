#pragma once

#include <memory>
#include <vector>

#include "patchtl/nn/layers.hpp"

namespace patchtl::nn {

/// A feed-forward classifier split into a convolutional feature stack and a
/// dense head ending in a single logit.
class Network {
 public:
  Network() = default;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  void add_feature(std::unique_ptr<Layer> l) { features_.push_back(std::move(l)); }
  void add_head(std::unique_ptr<Layer> l) { head_.push_back(std::move(l)); }

  void initialize(std::uint64_t seed) {
    for (auto& l : features_) l->initialize(seed);
    initialize_head(seed);
  }
  void initialize_head(std::uint64_t seed) {
    for (auto& l : head_) l->initialize(seed);
  }

  /// Activations at the end of the convolutional stack.
  Tensor features(const Tensor& x, Mode mode) {
    Tensor h = x;
    for (auto& l : features_) h = l->forward(h, mode);
    return h;
  }

  /// Logits, shape (N, 1).
  Tensor forward(const Tensor& x, Mode mode) {
    Tensor h = features(x, mode);
    for (auto& l : head_) h = l->forward(h, mode);
    return h;
  }

  /// Backpropagates d(loss)/d(logits) through the layers touched by the
  /// last forward call, stopping below the lowest trainable layer.
  void backward(const Tensor& dlogits) {
    plan_backprop();
    Tensor g = dlogits;
    std::size_t idx = features_.size() + head_.size();
    auto step = [&](Layer& l) {
      --idx;
      const bool need = needs_input_grad_[idx];
      g = l.backward(g, need);
      return need;
    };
    for (auto it = head_.rbegin(); it != head_.rend(); ++it)
      if (!step(**it)) return;
    for (auto it = features_.rbegin(); it != features_.rend(); ++it)
      if (!step(**it)) return;
  }

  std::vector<Unit> units() const {
    std::vector<Unit> out;
    for (auto& l : features_) l->collect_units(out);
    for (auto& l : head_) l->collect_units(out);
    return out;
  }

  std::vector<Buffer> buffers() const {
    std::vector<Buffer> out;
    for (auto& l : features_) l->collect_buffers(out);
    for (auto& l : head_) l->collect_buffers(out);
    return out;
  }

  std::vector<Param*> params() const {
    std::vector<Param*> out;
    for (auto& u : units()) out.insert(out.end(), u.params.begin(), u.params.end());
    return out;
  }

  Shape feature_shape(const Shape& input) const {
    Shape s = input;
    for (auto& l : features_) s = l->output_shape(s);
    return s;
  }

 private:
  void plan_backprop() {
    std::vector<Layer*> all;
    for (auto& l : features_) all.push_back(l.get());
    for (auto& l : head_) all.push_back(l.get());
    needs_input_grad_.assign(all.size(), false);
    bool trainable_below = false;
    for (std::size_t i = 0; i < all.size(); ++i) {
      needs_input_grad_[i] = trainable_below;
      std::vector<Unit> u;
      all[i]->collect_units(u);
      for (auto& unit : u)
        for (auto* p : unit.params) trainable_below = trainable_below || !p->frozen;
    }
  }

  std::vector<std::unique_ptr<Layer>> features_;
  std::vector<std::unique_ptr<Layer>> head_;
  std::vector<bool> needs_input_grad_;
};

}  // namespace patchtl::nn
