#pragma once

// Backbones, the trainable-model interface, freezing, checkpoints and
// conv-stack transplantation across input sizes.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "patchtl/error.hpp"
#include "patchtl/losses.hpp"
#include "patchtl/nn/network.hpp"
#include "patchtl/tensor_io.hpp"
#include "patchtl/types.hpp"

namespace patchtl {

enum class Family { kVgg16, kVgg16Tiny, kResNet18, kPlugin };

struct BackboneSpec {
  Family family = Family::kVgg16Tiny;
  std::string plugin;  // registry key when family == kPlugin
  ImageSize input_hw{32, 32};
  std::size_t input_channels = 1;
  double width_multiplier = 1.0;

  std::string family_name() const {
    switch (family) {
      case Family::kVgg16: return "VGG16";
      case Family::kVgg16Tiny: return "VGG16_TINY";
      case Family::kResNet18: return "RESNET18";
      case Family::kPlugin: return plugin;
    }
    return "?";
  }

  /// Total spatial downsampling of the conv stack.
  static constexpr std::size_t kDownsampling = 32;

  void validate() const {
    if (input_channels != 1 && input_channels != 3) throw SpecError("input_channels must be 1 or 3");
    if (!(width_multiplier > 0.0)) throw SpecError("width_multiplier must be > 0");
    if (family == Family::kPlugin) return;
    if (input_hw.h < 32 || input_hw.w < 32) throw SpecError(family_name() + " requires input >= 32x32");
    if (input_hw.h % kDownsampling || input_hw.w % kDownsampling)
      throw SpecError("input " + to_string(input_hw) + " not divisible by downsampling factor 32");
  }

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

inline Family family_from_string(const std::string& s, std::string* plugin = nullptr) {
  if (s == "VGG16") return Family::kVgg16;
  if (s == "VGG16_TINY") return Family::kVgg16Tiny;
  if (s == "RESNET18") return Family::kResNet18;
  if (s.rfind("plugin:", 0) == 0) {
    if (plugin) *plugin = s.substr(7);
    return Family::kPlugin;
  }
  throw SpecError("unknown backbone family '" + s + "'");
}

inline nlohmann::json to_json(const BackboneSpec& s) {
  return {{"family", s.family == Family::kPlugin ? "plugin:" + s.plugin : s.family_name()},
          {"input_hw", {s.input_hw.h, s.input_hw.w}},
          {"input_channels", s.input_channels},
          {"width_multiplier", s.width_multiplier}};
}

inline BackboneSpec backbone_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.family = family_from_string(j.at("family").get<std::string>(), &s.plugin);
  s.input_hw = {j.at("input_hw").at(0).get<std::size_t>(), j.at("input_hw").at(1).get<std::size_t>()};
  s.input_channels = j.at("input_channels").get<std::size_t>();
  s.width_multiplier = j.at("width_multiplier").get<double>();
  return s;
}

// ---------------------------------------------------------------------------
// Backbone builders

using BackboneBuilder = std::function<nn::Network(const BackboneSpec&)>;

inline std::map<std::string, BackboneBuilder>& backbone_registry() {
  static std::map<std::string, BackboneBuilder> registry;
  return registry;
}

/// Plugs an extra family (VGG19, ResNet34, ...) into build_model under `plugin:<name>`.
inline void register_backbone(const std::string& name, BackboneBuilder builder) {
  backbone_registry()[name] = std::move(builder);
}

namespace detail {

inline std::size_t scaled(std::size_t base, double width) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(double(base) * width)));
}

}  // namespace detail

/// VGG16: 13 3x3 convs in five pooled blocks, then fc-fc-logit (16 weight layers).
inline nn::Network build_vgg16(const BackboneSpec& spec) {
  using namespace nn;
  Network net;
  const std::size_t blocks[5][2] = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
  std::size_t cin = spec.input_channels;
  for (std::size_t b = 0; b < 5; ++b) {
    const std::size_t cout = patchtl::detail::scaled(blocks[b][1], spec.width_multiplier);
    for (std::size_t i = 0; i < blocks[b][0]; ++i) {
      const std::string name = "features/block" + std::to_string(b + 1) + "_conv" + std::to_string(i + 1);
      net.add_feature(std::make_unique<Conv2D>(name, cin, cout, 3, 1, 1, false));
      net.add_feature(std::make_unique<ReLU>());
      cin = cout;
    }
    net.add_feature(std::make_unique<MaxPool>(2, 2));
  }
  const std::size_t flat = cin * (spec.input_hw.h / 32) * (spec.input_hw.w / 32);
  const std::size_t fc = patchtl::detail::scaled(4096, spec.width_multiplier);
  net.add_head(std::make_unique<Flatten>());
  net.add_head(std::make_unique<Dense>("head/fc1", flat, fc));
  net.add_head(std::make_unique<ReLU>());
  net.add_head(std::make_unique<Dense>("head/fc2", fc, fc));
  net.add_head(std::make_unique<ReLU>());
  net.add_head(std::make_unique<Dense>("head/logit", fc, 1, true, true));
  return net;
}

/// ResNet18 with batch norm; global-average-pooled head.
inline nn::Network build_resnet18(const BackboneSpec& spec) {
  using namespace nn;
  Network net;
  const std::size_t c0 = patchtl::detail::scaled(64, spec.width_multiplier);
  net.add_feature(std::make_unique<Conv2D>("features/stem", spec.input_channels, c0, 7, 2, 3, true));
  net.add_feature(std::make_unique<ReLU>());
  net.add_feature(std::make_unique<MaxPool>(3, 2, 1));
  std::size_t cin = c0;
  const std::size_t widths[4] = {64, 128, 256, 512};
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const std::size_t cout = patchtl::detail::scaled(widths[stage], spec.width_multiplier);
    for (std::size_t b = 0; b < 2; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string name = "features/stage" + std::to_string(stage + 1) + "_block" + std::to_string(b + 1);
      net.add_feature(std::make_unique<ResidualBlock>(name, cin, cout, stride));
      cin = cout;
    }
  }
  net.add_head(std::make_unique<GlobalAvgPool>());
  net.add_head(std::make_unique<Dense>("head/logit", cin, 1, true, true));
  return net;
}

inline nn::Network build_network(const BackboneSpec& spec) {
  spec.validate();
  switch (spec.family) {
    case Family::kVgg16: {
      BackboneSpec full = spec;
      full.width_multiplier = 1.0;
      return build_vgg16(full);
    }
    case Family::kVgg16Tiny: return build_vgg16(spec);
    case Family::kResNet18: return build_resnet18(spec);
    case Family::kPlugin: {
      auto it = backbone_registry().find(spec.plugin);
      if (it == backbone_registry().end()) throw SpecError("no backbone registered as '" + spec.plugin + "'");
      return it->second(spec);
    }
  }
  throw SpecError("unhandled family");
}

// ---------------------------------------------------------------------------
// Weights and checkpoints

using WeightMap = std::map<std::string, Tensor>;

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline std::string weights_hash(const WeightMap& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : w) {
    h = fnv1a(name, h);
    h = fnv1a(shape_str(t.shape()), h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)), h);
  }
  return hex64(h);
}

enum class Domain { kPatch, kSlice };

inline std::string to_string(Domain d) { return d == Domain::kPatch ? "patch" : "slice"; }
inline Domain domain_from_string(const std::string& s) {
  if (s == "patch") return Domain::kPatch;
  if (s == "slice") return Domain::kSlice;
  throw FormatError("unknown checkpoint domain '" + s + "'");
}

struct CheckpointMeta {
  Domain domain = Domain::kSlice;
  Modality modality = Modality::kT2W;
  BackboneSpec backbone;
  std::string config_hash;
  double best_val_auc = 0.0;
  int epoch = 0;
  std::optional<std::string> source_checkpoint_hash;
  std::optional<Modality> source_modality;
};

struct Checkpoint {
  WeightMap weights;
  CheckpointMeta meta;

  std::string hash() const { return weights_hash(weights); }
};

inline bool is_head_tensor(const std::string& name) { return name.rfind("head/", 0) == 0; }

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j = {{"domain", to_string(m.domain)},
                      {"modality", to_string(m.modality)},
                      {"backbone", to_json(m.backbone)},
                      {"input_hw", {m.backbone.input_hw.h, m.backbone.input_hw.w}},
                      {"config_hash", m.config_hash},
                      {"best_val_auc", m.best_val_auc},
                      {"epoch", m.epoch}};
  if (m.source_checkpoint_hash) j["source_checkpoint_hash"] = *m.source_checkpoint_hash;
  if (m.source_modality) j["source_modality"] = to_string(*m.source_modality);
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.domain = domain_from_string(j.at("domain").get<std::string>());
  m.modality = modality_from_string(j.at("modality").get<std::string>());
  m.backbone = backbone_from_json(j.at("backbone"));
  m.config_hash = j.value("config_hash", "");
  m.best_val_auc = j.value("best_val_auc", 0.0);
  m.epoch = j.value("epoch", 0);
  if (j.contains("source_checkpoint_hash")) m.source_checkpoint_hash = j["source_checkpoint_hash"].get<std::string>();
  if (j.contains("source_modality")) m.source_modality = modality_from_string(j["source_modality"].get<std::string>());
  return m;
}

inline std::string tensor_file_name(const std::string& name) {
  std::string f = name;
  for (auto& c : f)
    if (c == '/') c = '.';
  return f + ".ptnsr";
}

/// Directory layout: one portable tensor per weight (rank<2 stored as 1xN,
/// rank>3 flattened to 2D) plus meta.json carrying meta and true shapes.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = meta_to_json(ck.meta);
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, t] : ck.weights) {
    shapes[name] = t.shape();
    Tensor stored = t.rank() == 1 ? t.reshaped({1, t.size()})
                    : t.rank() > 3 ? t.reshaped({t.dim(0), t.size() / t.dim(0)})
                                   : t;
    write_tensor(dir / tensor_file_name(name), stored);
  }
  j["tensors"] = shapes;
  j["weights_hash"] = ck.hash();
  std::ofstream f(dir / "meta.json");
  if (!f) throw IoError("cannot write " + (dir / "meta.json").string());
  f << j.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "meta.json");
  if (!f) throw IoError("missing checkpoint meta: " + (dir / "meta.json").string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint meta: ") + e.what());
  }
  Checkpoint ck;
  ck.meta = meta_from_json(j);
  for (const auto& [name, shape] : j.at("tensors").items()) {
    Tensor t = read_tensor(dir / tensor_file_name(name));
    ck.weights[name] = std::move(t).reshaped(shape.get<Shape>());
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Trainable model interface

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// What the training loop needs from a differentiable engine.
class Backend {
 public:
  virtual ~Backend() = default;
  /// Called once at the start of every epoch (1-based).
  virtual void begin_epoch(int /*epoch*/) {}
  /// Inference-mode probabilities for a (N,C,H,W) batch.
  virtual std::vector<double> predict(const Tensor& batch) = 0;
  /// One optimizer step; returns the mean data loss of the batch.
  virtual double train_step(const Tensor& batch, std::span<const int> labels, const LossConfig& loss,
                            const AdamConfig& adam, double lr, double l2_coeff) = 0;
  virtual WeightMap export_weights() const = 0;
  virtual void import_weights(const WeightMap& w) = 0;
  /// Sum of squared kernel weights (the L2 regularized set).
  virtual double l2_penalty() const = 0;
};

struct FreezePlan {
  std::size_t frozen_prefix_len = 0;
};

class Model : public Backend {
 public:
  Model(BackboneSpec spec, nn::Network net) : spec_(std::move(spec)), net_(std::move(net)) {}
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const BackboneSpec& spec() const { return spec_; }
  nn::Network& network() { return net_; }

  std::size_t layer_count() const { return net_.units().size(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto* p : net_.params()) n += p->value.size();
    return n;
  }
  /// Parameter name -> shape, in canonical order.
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (auto* p : net_.params()) out.emplace_back(p->name, p->value.shape());
    return out;
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.input_channels || x.dim(2) != spec_.input_hw.h ||
        x.dim(3) != spec_.input_hw.w)
      throw ValidationError("model expects (N," + std::to_string(spec_.input_channels) + "," +
                            std::to_string(spec_.input_hw.h) + "," + std::to_string(spec_.input_hw.w) +
                            "), got " + shape_str(x.shape()));
  }

  std::vector<double> predict(const Tensor& batch) override {
    check_input(batch);
    const Tensor logits = net_.forward(batch, nn::Mode::kEval);
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits[i]);
    return p;
  }

  /// Conv-stack activations; accepts any input size the stack can process.
  Tensor conv_activations(const Tensor& batch) { return net_.features(batch, nn::Mode::kEval); }

  double train_step(const Tensor& batch, std::span<const int> labels, const LossConfig& loss,
                    const AdamConfig& adam, double lr, double l2_coeff) override {
    check_input(batch);
    if (labels.size() != batch.dim(0)) throw ValidationError("label count does not match batch");
    auto params = net_.params();
    for (auto* p : params) p->zero_grad();
    const Tensor logits = net_.forward(batch, nn::Mode::kTrain);
    const std::size_t n = labels.size();
    Tensor dlogits({n, 1});
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += loss_value(loss, sigmoid(logits[i]), labels[i]);
      dlogits[i] = static_cast<float>(loss_logit_grad(loss, logits[i], labels[i]) / double(n));
    }
    net_.backward(dlogits);
    ++step_;
    const double bc1 = 1.0 - std::pow(adam.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(adam.beta2, double(step_));
    const float b1 = float(adam.beta1), b2 = float(adam.beta2);
    for (auto* p : params) {
      if (p->frozen) continue;
      p->ensure_moments();
      const float decay = p->decay ? float(2.0 * l2_coeff) : 0.0f;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const float g = p->grad[i] + decay * p->value[i];
        p->m[i] = b1 * p->m[i] + (1.0f - b1) * g;
        p->v[i] = b2 * p->v[i] + (1.0f - b2) * g * g;
        const double mhat = p->m[i] / bc1, vhat = p->v[i] / bc2;
        p->value[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + adam.epsilon));
      }
    }
    return total / double(n);
  }

  /// The objective minimized by train_step at the current weights.
  double total_loss(const Tensor& batch, std::span<const int> labels, const LossConfig& loss, double l2_coeff) {
    check_input(batch);
    const Tensor logits = net_.forward(batch, nn::Mode::kTrain);
    double data = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) data += loss_value(loss, sigmoid(logits[i]), labels[i]);
    return data / double(labels.size()) + l2_coeff * l2_penalty();
  }

  WeightMap export_weights() const override {
    WeightMap w;
    for (auto* p : net_.params()) w[p->name] = p->value;
    for (auto& b : net_.buffers()) w[b.name] = *b.value;
    return w;
  }

  /// Requires exactly the model's tensor set with matching element counts.
  void import_weights(const WeightMap& w) override {
    std::size_t expected = 0;
    auto assign = [&](const std::string& name, Tensor& dst) {
      auto it = w.find(name);
      if (it == w.end()) throw InitializationError("weights missing tensor '" + name + "'");
      if (it->second.size() != dst.size())
        throw InitializationError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                                  ", model expects " + shape_str(dst.shape()));
      std::copy(it->second.vec().begin(), it->second.vec().end(), dst.vec().begin());
      ++expected;
    };
    for (auto* p : net_.params()) assign(p->name, p->value);
    for (auto& b : net_.buffers()) assign(b.name, *b.value);
    if (expected != w.size()) throw InitializationError("weights contain tensors unknown to this backbone");
  }

  /// Copies the given subset; every listed tensor must exist with the same size.
  void import_partial(const WeightMap& w) {
    std::map<std::string, Tensor*> slots;
    for (auto* p : net_.params()) slots[p->name] = &p->value;
    for (auto& b : net_.buffers()) slots[b.name] = b.value;
    for (const auto& [name, t] : w) {
      auto it = slots.find(name);
      if (it == slots.end()) throw InitializationError("unknown tensor '" + name + "'");
      if (it->second->size() != t.size())
        throw InitializationError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                                  shape_str(it->second->shape()));
      std::copy(t.vec().begin(), t.vec().end(), it->second->vec().begin());
    }
  }

  double l2_penalty() const override {
    double s = 0.0;
    for (auto* p : net_.params())
      if (p->decay)
        for (float v : p->value.values()) s += double(v) * v;
    return s;
  }

  /// Freezes the first `plan.frozen_prefix_len` units and unfreezes the rest.
  void set_freeze(const FreezePlan& plan, bool freeze_norm_stats = true) {
    auto units = net_.units();
    if (plan.frozen_prefix_len > units.size())
      throw ValidationError("freeze plan " + std::to_string(plan.frozen_prefix_len) + " exceeds " +
                            std::to_string(units.size()) + " parameterized layers");
    for (std::size_t i = 0; i < units.size(); ++i) {
      const bool frozen = i < plan.frozen_prefix_len;
      for (auto* p : units[i].params) p->frozen = frozen;
      if (units[i].norm) units[i].norm->set_use_running_stats(frozen && freeze_norm_stats);
    }
    freeze_ = plan;
  }
  const FreezePlan& freeze_plan() const { return freeze_; }

  void reinitialize_head(std::uint64_t seed) { net_.initialize_head(seed); }

 private:
  BackboneSpec spec_;
  nn::Network net_;
  FreezePlan freeze_;
  long step_ = 0;
};

enum class InitMode { kRandom, kPretrainedAsset, kCheckpoint };

inline std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::kRandom: return "RANDOM";
    case InitMode::kPretrainedAsset: return "PRETRAINED_ASSET";
    case InitMode::kCheckpoint: return "CHECKPOINT";
  }
  return "?";
}

inline InitMode init_mode_from_string(const std::string& s) {
  if (s == "RANDOM") return InitMode::kRandom;
  if (s == "PRETRAINED_ASSET") return InitMode::kPretrainedAsset;
  if (s == "CHECKPOINT") return InitMode::kCheckpoint;
  throw ConfigError("unknown init mode '" + s + "'");
}

/// Builds a model. `source` is the asset or checkpoint directory for the
/// non-random modes. A pretrained asset supplies the conv stack only.
inline Model build_model(const BackboneSpec& spec, InitMode init, std::uint64_t seed,
                         const std::filesystem::path& source = {}) {
  Model model(spec, build_network(spec));
  model.network().initialize(seed);
  if (init == InitMode::kRandom) return model;
  if (init == InitMode::kPretrainedAsset && spec.input_channels != 3)
    throw InitializationError("pretrained assets require 3 input channels (replicate grayscale first)");
  if (source.empty()) throw InitializationError(to_string(init) + " requires a source directory");
  const Checkpoint src = load_checkpoint(source);
  if (init == InitMode::kCheckpoint) {
    model.import_weights(src.weights);
    return model;
  }
  WeightMap conv;
  for (const auto& [name, shape] : model.parameter_shapes())
    if (!is_head_tensor(name)) {
      auto it = src.weights.find(name);
      if (it == src.weights.end()) throw InitializationError("asset lacks tensor '" + name + "'");
      conv[name] = it->second;
    }
  for (const auto& [name, t] : src.weights)
    if (!is_head_tensor(name) && !conv.count(name) && name.find("/bn_") != std::string::npos) conv[name] = t;
  model.import_partial(conv);
  return model;
}

/// Same family and channels as the source; conv stack copied verbatim and
/// the dense head freshly initialized for the target input size.
inline Model transplant_conv_stack(const Checkpoint& src, const BackboneSpec& target, std::uint64_t seed) {
  const BackboneSpec& s = src.meta.backbone;
  if (s.family != target.family || s.plugin != target.plugin)
    throw TransplantError("family mismatch: " + s.family_name() + " -> " + target.family_name());
  if (s.input_channels != target.input_channels) throw TransplantError("input channel mismatch");
  if (s.family == Family::kVgg16Tiny && s.width_multiplier != target.width_multiplier)
    throw TransplantError("width multiplier mismatch");
  Model model(target, build_network(target));
  model.network().initialize(seed);
  WeightMap conv;
  for (const auto& [name, t] : src.weights)
    if (!is_head_tensor(name)) conv[name] = t;
  try {
    model.import_partial(conv);
  } catch (const InitializationError& e) {
    throw TransplantError(e.what());
  }
  return model;
}

inline Model& apply_freeze(Model& model, const FreezePlan& plan, bool freeze_norm_stats = true) {
  model.set_freeze(plan, freeze_norm_stats);
  return model;
}

}  // namespace patchtl
