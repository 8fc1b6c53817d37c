#pragma once

// Strict experiment configuration: unknown keys and wrong types are errors
// that carry the offending field path. to_json emits every field, so a
// parsed-and-reemitted config is closed under defaults.

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "patchtl/cohort.hpp"
#include "patchtl/core_data.hpp"
#include "patchtl/models.hpp"
#include "patchtl/training.hpp"

namespace patchtl {

/// Validation failure attached to a config field ("stages.slice.batch_size").
class ConfigFieldError : public ValidationError {
 public:
  ConfigFieldError(std::string field, const std::string& what)
      : ValidationError(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigFieldError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T req(const std::string& key) {
    if (!j_.contains(key)) throw ConfigFieldError(field(key), "required field missing");
    return get<T>(key);
  }

  template <class T>
  T opt(const std::string& key, T fallback) {
    return j_.contains(key) ? get<T>(key) : fallback;
  }

  ImageSize size_pair(const std::string& key, ImageSize fallback) {
    if (!j_.contains(key)) return fallback;
    seen_.insert(key);
    const auto& v = j_.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned())
      throw ConfigFieldError(field(key), "expected [height, width]");
    return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  }

  JsonReader child(const std::string& key) {
    if (!j_.contains(key)) throw ConfigFieldError(field(key), "required section missing");
    seen_.insert(key);
    return JsonReader(j_.at(key), field(key));
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& path() const { return path_; }
  bool is_null(const std::string& key) const { return j_.contains(key) && j_.at(key).is_null(); }
  void mark(const std::string& key) { seen_.insert(key); }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigFieldError(field(k), "unknown key");
  }

  /// Runs `check`, re-raising plain validation errors against `key`.
  template <class F>
  void check(const std::string& key, F&& f) const {
    try {
      f();
    } catch (const ConfigFieldError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigFieldError(field(key), e.what());
    }
  }

 private:
  template <class T>
  T get(const std::string& key) {
    seen_.insert(key);
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigFieldError(field(key), "expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigFieldError(field(key), "expected a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigFieldError(field(key), "expected a number");
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigFieldError(field(key), "expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigFieldError(field(key), "expected an integer");
    }
    return v.get<T>();
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
auto with_field(const std::string& field, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigFieldError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigFieldError(field, e.what());
  }
}

// ---------------------------------------------------------------------------
// Sections

inline nlohmann::json hw_json(ImageSize s) { return {s.h, s.w}; }

inline PhantomSpec parse_phantom(JsonReader r) {
  PhantomSpec s;
  s.n_patients = r.opt("n_patients", s.n_patients);
  s.cs_fraction = r.opt("cs_fraction", s.cs_fraction);
  s.t2w_hw = r.size_pair("t2w_hw", s.t2w_hw);
  s.adc_hw = r.size_pair("adc_hw", s.adc_hw);
  s.n_slices = r.opt("n_slices", s.n_slices);
  s.lesion_contrast = r.opt("lesion_contrast", s.lesion_contrast);
  s.noise_level = r.opt("noise_level", s.noise_level);
  s.seed = r.opt("seed", s.seed);
  s.ncs_contrast_ratio = r.opt("ncs_contrast_ratio", s.ncs_contrast_ratio);
  s.lesion_sigma = r.opt("lesion_sigma", s.lesion_sigma);
  s.distractors = r.opt("distractors", s.distractors);
  r.finish();
  with_field(r.path().empty() ? "<root>" : r.path(), [&] { s.validate(); });
  return s;
}

inline nlohmann::json to_json(const PhantomSpec& s) {
  return {{"n_patients", s.n_patients},   {"cs_fraction", s.cs_fraction},
          {"t2w_hw", hw_json(s.t2w_hw)},   {"adc_hw", hw_json(s.adc_hw)},
          {"n_slices", s.n_slices},        {"lesion_contrast", s.lesion_contrast},
          {"noise_level", s.noise_level},  {"seed", s.seed},
          {"ncs_contrast_ratio", s.ncs_contrast_ratio}, {"lesion_sigma", s.lesion_sigma},
          {"distractors", s.distractors}};
}

inline PhantomSpec phantom_from_json(const nlohmann::json& j) { return parse_phantom(JsonReader(j, "")); }

inline LossConfig parse_loss(JsonReader r) {
  LossConfig l;
  const auto kind = r.opt<std::string>("kind", "CE");
  r.check("kind", [&] { l.kind = loss_kind_from_string(kind); });
  l.gamma = r.opt("gamma", l.gamma);
  l.alpha = r.opt("alpha", l.alpha);
  r.finish();
  r.check("gamma", [&] { l.validate(); });
  return l;
}

inline AugmentConfig parse_augment(JsonReader r) {
  AugmentConfig a;
  a.enabled = r.opt("enabled", a.enabled);
  a.rotation_deg = r.opt("rotation_deg", a.rotation_deg);
  a.translate_frac = r.opt("translate_frac", a.translate_frac);
  a.vflip_prob = r.opt("vflip_prob", a.vflip_prob);
  r.finish();
  r.check("enabled", [&] { a.validate(); });
  return a;
}

inline TrainConfig parse_train(JsonReader r) {
  TrainConfig c;
  c.batch_size = r.opt("batch_size", c.batch_size);
  c.lr_main = r.opt("lr_main", c.lr_main);
  c.lr_warmup = r.opt("lr_warmup", c.lr_warmup);
  c.warmup_epochs = r.opt("warmup_epochs", c.warmup_epochs);
  c.max_epochs = r.opt("max_epochs", c.max_epochs);
  c.early_stop_patience = r.opt("early_stop_patience", c.early_stop_patience);
  c.early_stop_min_delta = r.opt("early_stop_min_delta", c.early_stop_min_delta);
  c.l2_coeff = r.opt("l2_coeff", c.l2_coeff);
  if (r.has("loss")) c.loss = parse_loss(r.child("loss"));
  c.freeze.frozen_prefix_len = r.opt("frozen_layers", c.freeze.frozen_prefix_len);
  c.freeze_norm_stats = r.opt("freeze_norm_stats", c.freeze_norm_stats);
  if (r.has("augment")) c.augment = parse_augment(r.child("augment"));
  if (r.has("adam")) {
    auto a = r.child("adam");
    c.adam.beta1 = a.opt("beta1", c.adam.beta1);
    c.adam.beta2 = a.opt("beta2", c.adam.beta2);
    c.adam.epsilon = a.opt("epsilon", c.adam.epsilon);
    a.finish();
    if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1 && c.adam.beta2 >= 0 && c.adam.beta2 < 1 && c.adam.epsilon > 0))
      throw ConfigFieldError(r.field("adam"), "need 0 <= beta < 1 and epsilon > 0");
  }
  r.finish();
  const std::pair<const char*, bool> checks[] = {
      {"batch_size", c.batch_size >= 1},          {"lr_main", c.lr_main > 0},
      {"lr_warmup", c.lr_warmup > 0},             {"warmup_epochs", c.warmup_epochs >= 0},
      {"max_epochs", c.max_epochs >= 1},          {"early_stop_patience", c.early_stop_patience >= 1},
      {"early_stop_min_delta", c.early_stop_min_delta >= 0}, {"l2_coeff", c.l2_coeff >= 0}};
  for (const auto& [key, ok] : checks)
    if (!ok) throw ConfigFieldError(r.field(key), "out of range");
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"lr_main", c.lr_main},
          {"lr_warmup", c.lr_warmup},
          {"warmup_epochs", c.warmup_epochs},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"early_stop_min_delta", c.early_stop_min_delta},
          {"l2_coeff", c.l2_coeff},
          {"loss", {{"kind", to_string(c.loss.kind)}, {"gamma", c.loss.gamma}, {"alpha", c.loss.alpha}}},
          {"frozen_layers", c.freeze.frozen_prefix_len},
          {"freeze_norm_stats", c.freeze_norm_stats},
          {"augment",
           {{"enabled", c.augment.enabled},
            {"rotation_deg", c.augment.rotation_deg},
            {"translate_frac", c.augment.translate_frac},
            {"vflip_prob", c.augment.vflip_prob}}},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}}};
}

// ---------------------------------------------------------------------------
// Experiment

enum class Protocol { kSliceBaseline, kSelfTl, kCrossTl };

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::kSliceBaseline: return "SLICE_BASELINE";
    case Protocol::kSelfTl: return "SELF_TL";
    case Protocol::kCrossTl: return "CROSS_TL";
  }
  return "?";
}

inline Protocol protocol_from_string(const std::string& s) {
  if (s == "SLICE_BASELINE") return Protocol::kSliceBaseline;
  if (s == "SELF_TL") return Protocol::kSelfTl;
  if (s == "CROSS_TL") return Protocol::kCrossTl;
  throw ValidationError("unknown protocol '" + s + "' (SLICE_BASELINE, SELF_TL, CROSS_TL)");
}

struct PatchSettings {
  std::size_t size = 32;
  std::optional<std::size_t> selection_k;
  bool export_patches = false;
};

struct ModelSettings {
  Family family = Family::kVgg16Tiny;
  std::string plugin;
  double width_multiplier = 0.125;
  std::size_t input_channels = 1;
  InitMode init = InitMode::kRandom;
  std::string asset;

  BackboneSpec backbone(ImageSize hw) const { return {family, plugin, hw, input_channels, width_multiplier}; }
};

struct ExperimentConfig {
  Protocol protocol = Protocol::kSliceBaseline;
  Modality source_modality = Modality::kT2W;  // patch stage (and the only modality unless CROSS_TL)
  Modality target_modality = Modality::kT2W;  // slice stage
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::optional<std::string> requires_note;
  std::optional<PhantomSpec> phantom;
  std::optional<std::string> cohort_dir;
  PreprocessConfig preprocess;
  std::array<double, 3> split{0.70, 0.20, 0.10};
  ModelSettings model;
  std::optional<PatchSettings> patch;
  std::optional<TrainConfig> patch_stage;
  TrainConfig slice_stage;
  std::vector<double> thresholds{0.5};

  bool uses_patches() const { return protocol != Protocol::kSliceBaseline; }
};

/// Parameterized layer count per built-in family, for freeze-plan checks.
inline std::optional<std::size_t> layer_units(Family f) {
  switch (f) {
    case Family::kVgg16:
    case Family::kVgg16Tiny: return 16;
    case Family::kResNet18: return 21;
    case Family::kPlugin: return std::nullopt;
  }
  return std::nullopt;
}

inline constexpr const char* kLargeRunMarker = "external dataset + accelerator";

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  JsonReader r(j, "");
  ExperimentConfig c;
  r.check("protocol", [&] { c.protocol = protocol_from_string(r.req<std::string>("protocol")); });
  if (c.protocol == Protocol::kCrossTl) {
    r.check("source_modality", [&] { c.source_modality = modality_from_string(r.req<std::string>("source_modality")); });
    r.check("target_modality", [&] { c.target_modality = modality_from_string(r.req<std::string>("target_modality")); });
    if (c.source_modality == c.target_modality)
      throw ConfigFieldError("target_modality", "CROSS_TL needs distinct source and target modalities");
  } else {
    r.check("modality", [&] { c.source_modality = c.target_modality = modality_from_string(r.req<std::string>("modality")); });
  }
  c.seed = r.opt("seed", c.seed);
  c.output_dir = r.opt("output_dir", c.output_dir);
  if (r.has("requires")) c.requires_note = r.req<std::string>("requires");

  {
    auto d = r.child("data");
    if (d.has("phantom") == d.has("cohort_dir"))
      throw ConfigFieldError("data", "exactly one of 'phantom' or 'cohort_dir' is required");
    if (d.has("phantom")) c.phantom = parse_phantom(d.child("phantom"));
    else c.cohort_dir = d.req<std::string>("cohort_dir");
    d.finish();
  }
  if (r.has("preprocess")) {
    auto p = r.child("preprocess");
    c.preprocess.t2w_hw = p.size_pair("t2w_hw", c.preprocess.t2w_hw);
    c.preprocess.adc_hw = p.size_pair("adc_hw", c.preprocess.adc_hw);
    c.preprocess.p_low = p.opt("p_low", c.preprocess.p_low);
    c.preprocess.p_high = p.opt("p_high", c.preprocess.p_high);
    p.finish();
    if (!(c.preprocess.p_low >= 0 && c.preprocess.p_high <= 100 && c.preprocess.p_low < c.preprocess.p_high))
      throw ConfigFieldError("preprocess.p_low", "need 0 <= p_low < p_high <= 100");
  } else if (c.phantom) {
    // A phantom is already at its own canonical sizes.
    c.preprocess.t2w_hw = c.phantom->t2w_hw;
    c.preprocess.adc_hw = c.phantom->adc_hw;
  }
  if (r.has("split")) {
    auto s = r.child("split");
    c.split = {s.opt("train", c.split[0]), s.opt("test", c.split[1]), s.opt("val", c.split[2])};
    s.finish();
    with_field("split", [&] { validate_fractions(c.split); });
  }
  {
    auto m = r.child("model");
    m.check("family", [&] { c.model.family = family_from_string(m.opt<std::string>("family", "VGG16_TINY"), &c.model.plugin); });
    c.model.width_multiplier = m.opt("width_multiplier", c.model.width_multiplier);
    c.model.input_channels = m.opt("input_channels", c.model.input_channels);
    m.check("init", [&] { c.model.init = init_mode_from_string(m.opt<std::string>("init", "RANDOM")); });
    c.model.asset = m.opt<std::string>("asset", "");
    m.finish();
    if (c.model.init == InitMode::kCheckpoint)
      throw ConfigFieldError("model.init", "CHECKPOINT init is not available in experiment configs");
    if (c.model.init == InitMode::kPretrainedAsset && c.model.asset.empty())
      throw ConfigFieldError("model.asset", "PRETRAINED_ASSET init needs an asset path");
    if (c.model.family == Family::kVgg16) c.model.width_multiplier = 1.0;
    with_field("model", [&] {
      c.model.backbone(c.preprocess.canonical(c.target_modality)).validate();
    });
  }
  if (c.uses_patches()) {
    auto p = r.child("patch");
    c.patch = PatchSettings{};
    c.patch->size = p.req<std::size_t>("size");
    if (p.is_null("selection_k")) p.mark("selection_k");
    else if (p.has("selection_k")) c.patch->selection_k = p.req<std::size_t>("selection_k");
    c.patch->export_patches = p.opt("export", false);
    p.finish();
    const auto g = with_field("patch.size", [&] { return make_grid(c.preprocess.canonical(c.source_modality), c.patch->size); });
    if (c.patch->selection_k && (*c.patch->selection_k < 1 || *c.patch->selection_k > g.cells()))
      throw ConfigFieldError("patch.selection_k", "outside [1, " + std::to_string(g.cells()) + "]");
  }
  {
    auto st = r.child("stages");
    if (c.uses_patches()) c.patch_stage = parse_train(st.child("patch"));
    c.slice_stage = parse_train(st.child("slice"));
    st.finish();
  }
  if (const auto units = layer_units(c.model.family)) {
    if (c.patch_stage && c.patch_stage->freeze.frozen_prefix_len > *units)
      throw ConfigFieldError("stages.patch.frozen_layers", "exceeds " + std::to_string(*units) + " layers");
    if (c.slice_stage.freeze.frozen_prefix_len > *units)
      throw ConfigFieldError("stages.slice.frozen_layers", "exceeds " + std::to_string(*units) + " layers");
  }
  if (r.has("thresholds")) {
    c.thresholds = r.req<std::vector<double>>("thresholds");
    for (double t : c.thresholds)
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigFieldError("thresholds", "thresholds must lie in [0,1]");
  }
  r.finish();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["protocol"] = to_string(c.protocol);
  if (c.protocol == Protocol::kCrossTl) {
    j["source_modality"] = to_string(c.source_modality);
    j["target_modality"] = to_string(c.target_modality);
  } else {
    j["modality"] = to_string(c.target_modality);
  }
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  if (c.requires_note) j["requires"] = *c.requires_note;
  j["data"] = c.phantom ? nlohmann::json{{"phantom", to_json(*c.phantom)}} : nlohmann::json{{"cohort_dir", *c.cohort_dir}};
  j["preprocess"] = {{"t2w_hw", hw_json(c.preprocess.t2w_hw)},
                     {"adc_hw", hw_json(c.preprocess.adc_hw)},
                     {"p_low", c.preprocess.p_low},
                     {"p_high", c.preprocess.p_high}};
  j["split"] = {{"train", c.split[0]}, {"test", c.split[1]}, {"val", c.split[2]}};
  j["model"] = {{"family", c.model.family == Family::kPlugin ? "plugin:" + c.model.plugin
                                                              : BackboneSpec{c.model.family, {}}.family_name()},
                {"width_multiplier", c.model.width_multiplier},
                {"input_channels", c.model.input_channels},
                {"init", to_string(c.model.init)},
                {"asset", c.model.asset}};
  if (c.patch)
    j["patch"] = {{"size", c.patch->size},
                  {"selection_k", c.patch->selection_k ? nlohmann::json(*c.patch->selection_k) : nlohmann::json(nullptr)},
                  {"export", c.patch->export_patches}};
  j["stages"] = nlohmann::json::object();
  if (c.patch_stage) j["stages"]["patch"] = to_json(*c.patch_stage);
  j["stages"]["slice"] = to_json(c.slice_stage);
  j["thresholds"] = c.thresholds;
  return j;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path.string());
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigFieldError("<root>", std::string("malformed JSON: ") + e.what());
    }
  }
  return parse_experiment_config(j);
}

}  // namespace patchtl
