#include <gtest/gtest.h>

#include "patchtl/core_data.hpp"
#include "patchtl/models.hpp"
#include "support.hpp"

using namespace patchtl;
using testing_support::TempDir;

namespace {

BackboneSpec tiny(ImageSize hw, double width = 0.125, std::size_t ch = 1) {
  return {Family::kVgg16Tiny, "", hw, ch, width};
}

BackboneSpec resnet(ImageSize hw, double width = 0.125) { return {Family::kResNet18, "", hw, 1, width}; }

Tensor batch(std::size_t n, ImageSize hw, std::uint64_t seed, std::size_t ch = 1) {
  return testing_support::random_tensor({n, ch, hw.h, hw.w}, seed);
}

std::vector<int> labels(std::size_t n) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = int(i % 2);
  return y;
}

// Loss of the training-mode forward pass, in double.
double batch_loss(Model& m, const Tensor& x, const std::vector<int>& y, const LossConfig& loss) {
  const Tensor logits = m.network().forward(x, nn::Mode::kTrain);
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += loss_value(loss, sigmoid(logits[i]), y[i]);
  return s / double(y.size());
}

}  // namespace

TEST(Backbone, SameSeedSameInitialWeights) {
  const auto a = build_model(tiny({32, 32}, 0.25), InitMode::kRandom, 5).export_weights();
  const auto b = build_model(tiny({32, 32}, 0.25), InitMode::kRandom, 5).export_weights();
  EXPECT_EQ(a, b);
  const auto c = build_model(tiny({32, 32}, 0.25), InitMode::kRandom, 6).export_weights();
  EXPECT_NE(a, c);
}

TEST(Backbone, ForwardGivesProbabilities) {
  for (const auto& spec : {tiny({64, 32}), resnet({64, 64})}) {
    Model m = build_model(spec, InitMode::kRandom, 1);
    const auto p = m.predict(batch(8, spec.input_hw, 2));
    ASSERT_EQ(p.size(), 8u);
    for (double v : p) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Backbone, InputSizeValidation) {
  EXPECT_THROW(tiny({100, 100}).validate(), SpecError);
  EXPECT_THROW(tiny({16, 16}).validate(), SpecError);
  EXPECT_THROW(tiny({32, 32}, 0.125, 2).validate(), SpecError);
  Model m = build_model(tiny({32, 32}), InitMode::kRandom, 1);
  EXPECT_THROW(m.predict(batch(2, {64, 64}, 1)), ValidationError);
}

// Shapes from the family definition: 13 3x3 convs with widths
// 64,64,128,128,256x3,512x6, then fc1 (4096 x 512*h/32*w/32), fc2, logit.
TEST(Backbone, Vgg16ConvShapesIndependentOfInputSize) {
  std::vector<std::pair<std::string, Shape>> conv;
  const std::size_t counts[5] = {2, 2, 3, 3, 3}, widths[5] = {64, 128, 256, 512, 512};
  std::size_t cin = 3;
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t i = 0; i < counts[b]; ++i) {
      const std::string n = "features/block" + std::to_string(b + 1) + "_conv" + std::to_string(i + 1);
      conv.push_back({n + "/kernel", {widths[b], cin * 9}});
      conv.push_back({n + "/bias", {widths[b]}});
      cin = widths[b];
    }
  auto shapes_of = [](ImageSize hw) {
    Model m(BackboneSpec{Family::kVgg16, "", hw, 3, 1.0}, build_network({Family::kVgg16, "", hw, 3, 1.0}));
    return m.parameter_shapes();
  };
  const auto small = shapes_of({32, 32});
  const auto large = shapes_of({320, 320});
  ASSERT_EQ(small.size(), conv.size() + 6);
  ASSERT_EQ(large.size(), small.size());
  for (std::size_t i = 0; i < conv.size(); ++i) {
    EXPECT_EQ(small[i], conv[i]);
    EXPECT_EQ(large[i], conv[i]);
  }
  EXPECT_EQ(small[conv.size()].second, (Shape{4096, 512}));
  EXPECT_EQ(large[conv.size()].second, (Shape{4096, 512 * 100}));
  EXPECT_EQ(large.back().second, (Shape{1}));
  EXPECT_EQ(Model({Family::kVgg16, "", {32, 32}, 3, 1.0}, build_network({Family::kVgg16, "", {32, 32}, 3, 1.0})).layer_count(), 16u);
}

TEST(Backbone, TinyWidthScalesChannels) {
  Model m = build_model(tiny({32, 32}, 0.25), InitMode::kRandom, 0);
  const auto s = m.parameter_shapes();
  EXPECT_EQ(s[0].second, (Shape{16, 9}));
  EXPECT_EQ(m.layer_count(), 16u);
}

TEST(Backbone, ParameterCountDeterministic) {
  EXPECT_EQ(build_model(resnet({64, 64}), InitMode::kRandom, 1).parameter_count(),
            build_model(resnet({64, 64}), InitMode::kRandom, 2).parameter_count());
  EXPECT_EQ(build_model(resnet({64, 64}), InitMode::kRandom, 1).layer_count(), 21u);
}

// Directional finite differences on the assembled network check the
// engine's backprop, one parameter tensor at a time.
TEST(Backprop, ParameterGradientsMatchFiniteDifferences) {
  struct Case {
    BackboneSpec spec;
    std::size_t batch;
  };
  for (const auto& [spec, n] : {Case{tiny({32, 32}, 0.0625), 4}, Case{resnet({64, 64}, 0.25), 8}}) {
    Model m = build_model(spec, InitMode::kRandom, 3);
    const Tensor x = batch(n, spec.input_hw, 4);
    const auto y = labels(n);
    const LossConfig loss;
    auto params = m.network().params();
    for (auto* p : params) p->zero_grad();
    const Tensor logits = m.network().forward(x, nn::Mode::kTrain);
    Tensor d({n, 1});
    for (std::size_t i = 0; i < n; ++i) d[i] = float(loss_logit_grad(loss, logits[i], y[i]) / double(n));
    m.network().backward(d);
    Rng rng(5);
    for (auto* p : params) {
      std::vector<double> dir(p->value.size());
      double norm = 0, an = 0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      for (std::size_t i = 0; i < dir.size(); ++i) an += p->grad[i] * (dir[i] /= std::sqrt(norm));
      // A step can straddle a ReLU or max-pool switch; the closer of two
      // step sizes is compared.
      const Tensor orig = p->value;
      double best = INFINITY;
      for (double h : {1e-3, 3e-4}) {
        for (std::size_t i = 0; i < dir.size(); ++i) p->value[i] = float(orig[i] + h * dir[i]);
        const double up = batch_loss(m, x, y, loss);
        for (std::size_t i = 0; i < dir.size(); ++i) p->value[i] = float(orig[i] - h * dir[i]);
        const double dn = batch_loss(m, x, y, loss);
        p->value = orig;
        const double fd = (up - dn) / (2 * h);
        if (std::abs(fd - an) < std::abs(best - an)) best = fd;
      }
      EXPECT_NEAR(an, best, 2e-3 + 5e-2 * std::abs(an)) << spec.family_name() << " " << p->name;
    }
  }
}

TEST(Freeze, PlanZeroLeavesEverythingTrainable) {
  Model m = build_model(tiny({32, 32}), InitMode::kRandom, 1);
  apply_freeze(m, {0});
  for (auto* p : m.network().params()) EXPECT_FALSE(p->frozen);
}

TEST(Freeze, FifteenLeavesOnlyFinalDense) {
  Model m = build_model(tiny({32, 32}), InitMode::kRandom, 1);
  apply_freeze(m, {15});
  for (auto* p : m.network().params()) EXPECT_EQ(p->frozen, p->name.rfind("head/logit", 0) != 0) << p->name;
}

TEST(Freeze, PlanBeyondLayerCountRejected) {
  Model m = build_model(tiny({32, 32}), InitMode::kRandom, 1);
  EXPECT_THROW(apply_freeze(m, {17}), ValidationError);
}

TEST(Freeze, FrozenWeightsBitwiseUnchangedAfterSteps) {
  for (const auto& spec : {tiny({32, 32}), resnet({32, 32})}) {
    Model m = build_model(spec, InitMode::kRandom, 1);
    apply_freeze(m, {11});
    const auto before = m.export_weights();
    std::set<std::string> frozen;
    auto units = m.network().units();
    for (std::size_t u = 0; u < 11; ++u)
      for (auto* p : units[u].params) frozen.insert(p->name);
    for (int s = 0; s < 3; ++s) m.train_step(batch(4, spec.input_hw, 10 + s), labels(4), {}, {}, 1e-2, 1e-3);
    const auto after = m.export_weights();
    std::size_t changed = 0;
    for (const auto& [name, t] : before) {
      if (frozen.count(name)) {
        EXPECT_EQ(after.at(name), t) << name;
      }
      changed += !(after.at(name) == t);
    }
    EXPECT_GT(changed, 0u);
  }
}

TEST(Transplant, ConvActivationsAgreeOnSourceSizedTile) {
  Model src = build_model(tiny({32, 32}), InitMode::kRandom, 7);
  src.train_step(batch(4, {32, 32}, 1), labels(4), {}, {}, 1e-3, 0);
  Checkpoint ck{src.export_weights(), {}};
  ck.meta.backbone = src.spec();
  Model dst = transplant_conv_stack(ck, tiny({128, 128}), 99);
  const Tensor tile = batch(2, {32, 32}, 8);
  EXPECT_LE(max_abs_diff(src.conv_activations(tile), dst.conv_activations(tile)), 1e-6);
}

TEST(Transplant, SameSpecCopiesAllButHead) {
  Model src = build_model(tiny({32, 32}), InitMode::kRandom, 7);
  Checkpoint ck{src.export_weights(), {}};
  ck.meta.backbone = src.spec();
  const auto w = transplant_conv_stack(ck, tiny({32, 32}), 1234).export_weights();
  for (const auto& [name, t] : ck.weights) {
    if (!is_head_tensor(name)) {
      EXPECT_EQ(w.at(name), t) << name;
    } else if (name.ends_with("/kernel")) {
      EXPECT_NE(w.at(name), t) << name;
    }
  }
}

TEST(Transplant, MismatchesRejected) {
  Model src = build_model(tiny({32, 32}), InitMode::kRandom, 7);
  Checkpoint ck{src.export_weights(), {}};
  ck.meta.backbone = src.spec();
  EXPECT_THROW(transplant_conv_stack(ck, resnet({64, 64}), 1), TransplantError);
  EXPECT_THROW(transplant_conv_stack(ck, tiny({64, 64}, 0.125, 3), 1), TransplantError);
  EXPECT_THROW(transplant_conv_stack(ck, tiny({64, 64}, 0.25), 1), TransplantError);
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  TempDir dir("ckpt");
  Model m = build_model(resnet({32, 32}), InitMode::kRandom, 3);
  Checkpoint ck{m.export_weights(), {}};
  ck.meta.domain = Domain::kPatch;
  ck.meta.modality = Modality::kADC;
  ck.meta.backbone = m.spec();
  ck.meta.best_val_auc = 0.75;
  ck.meta.epoch = 12;
  ck.meta.source_checkpoint_hash = "abc";
  save_checkpoint(dir / "ck", ck);
  const Checkpoint back = load_checkpoint(dir / "ck");
  EXPECT_EQ(back.weights, ck.weights);
  EXPECT_EQ(back.hash(), ck.hash());
  EXPECT_EQ(back.meta.domain, Domain::kPatch);
  EXPECT_EQ(back.meta.modality, Modality::kADC);
  EXPECT_EQ(back.meta.backbone, ck.meta.backbone);
  EXPECT_EQ(back.meta.epoch, 12);
  EXPECT_EQ(back.meta.source_checkpoint_hash, "abc");
  const auto meta = detail::read_json_file(dir / "ck/meta.json");
  EXPECT_EQ(meta.at("input_hw"), nlohmann::json({32, 32}));
}

TEST(Init, CheckpointInitRestoresWeights) {
  TempDir dir("init");
  Model m = build_model(tiny({32, 32}), InitMode::kRandom, 3);
  Checkpoint ck{m.export_weights(), {}};
  ck.meta.backbone = m.spec();
  save_checkpoint(dir / "ck", ck);
  EXPECT_EQ(build_model(tiny({32, 32}), InitMode::kCheckpoint, 77, dir / "ck").export_weights(), ck.weights);
}

TEST(Init, PretrainedAssetLoadsConvStackOnly) {
  TempDir dir("asset");
  Model donor = build_model(tiny({64, 64}, 0.125, 3), InitMode::kRandom, 3);
  Checkpoint asset{donor.export_weights(), {}};
  asset.meta.backbone = donor.spec();
  save_checkpoint(dir / "asset", asset);
  const auto w = build_model(tiny({32, 32}, 0.125, 3), InitMode::kPretrainedAsset, 9, dir / "asset").export_weights();
  for (const auto& [name, t] : w) {
    if (!is_head_tensor(name)) {
      EXPECT_EQ(t, asset.weights.at(name)) << name;
    }
  }
  EXPECT_THROW(build_model(tiny({32, 32}, 0.125, 1), InitMode::kPretrainedAsset, 9, dir / "asset"), InitializationError);
  EXPECT_THROW(build_model(tiny({32, 32}, 0.25, 3), InitMode::kPretrainedAsset, 9, dir / "asset"), InitializationError);
}

TEST(Regularization, PenaltyIsSumOfSquaredKernels) {
  Model m = build_model(tiny({32, 32}), InitMode::kRandom, 3);
  double s = 0;
  for (const auto& [name, t] : m.export_weights())
    if (name.size() > 7 && name.compare(name.size() - 7, 7, "/kernel") == 0)
      for (float v : t.values()) s += double(v) * v;
  EXPECT_NEAR(m.l2_penalty(), s, 1e-9 * s);
}

TEST(Plugin, RegisteredFamilyBuilds) {
  register_backbone("tiny_alias", [](const BackboneSpec& s) {
    BackboneSpec t = s;
    t.family = Family::kVgg16Tiny;
    return build_vgg16(t);
  });
  BackboneSpec s{Family::kPlugin, "tiny_alias", {32, 32}, 1, 0.125};
  EXPECT_EQ(family_from_string("plugin:tiny_alias"), Family::kPlugin);
  Model m = build_model(s, InitMode::kRandom, 1);
  EXPECT_EQ(m.predict(batch(2, {32, 32}, 1)).size(), 2u);
  EXPECT_THROW(build_model({Family::kPlugin, "missing", {32, 32}, 1, 1.0}, InitMode::kRandom, 1), SpecError);
}
