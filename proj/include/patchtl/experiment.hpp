#pragma once

// End-to-end runner: data -> preprocess -> split -> [patches -> patch stage]
// -> slice stage -> test evaluation, plus report and ROC plot emission.

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "patchtl/config.hpp"

namespace patchtl {

/// Runtime failure tagged with the pipeline stage it happened in.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

template <class F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

inline std::string hash_config(const ExperimentConfig& cfg) { return hex64(fnv1a(to_json(cfg).dump())); }

// ---------------------------------------------------------------------------
// Report and plot

inline std::string fmt_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// FPR on x, TPR on y; one polyline vertex per ROC point.
inline std::string roc_svg(const std::vector<std::pair<double, double>>& roc, double auc) {
  constexpr double kSize = 400, kPad = 50, kPlot = kSize - 2 * kPad;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize << "\" viewBox=\"0 0 "
    << kSize << ' ' << kSize << "\">\n";
  s << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << kPlot << "\" height=\"" << kPlot
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << kPad << "\" y1=\"" << kPad + kPlot << "\" x2=\"" << kPad + kPlot << "\" y2=\"" << kPad
    << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    s << "<text x=\"" << kPad + f * kPlot << "\" y=\"" << kPad + kPlot + 16 << "\" font-size=\"10\" text-anchor=\"middle\">"
      << fmt_fixed(f, 2) << "</text>\n";
    s << "<text x=\"" << kPad - 6 << "\" y=\"" << kPad + (1 - f) * kPlot + 3 << "\" font-size=\"10\" text-anchor=\"end\">"
      << fmt_fixed(f, 2) << "</text>\n";
  }
  s << "<text x=\"" << kSize / 2 << "\" y=\"" << kSize - 12 << "\" font-size=\"12\" text-anchor=\"middle\">FPR</text>\n";
  s << "<text x=\"14\" y=\"" << kSize / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << kSize / 2 << ")\">TPR</text>\n";
  s << "<text x=\"" << kSize / 2 << "\" y=\"30\" font-size=\"13\" text-anchor=\"middle\">ROC (AUC " << fmt_fixed(auc, 3)
    << ")</text>\n";
  s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < roc.size(); ++i)
    s << (i ? " " : "") << fmt_fixed(kPad + roc[i].first * kPlot, 2) << ',' << fmt_fixed(kPad + (1 - roc[i].second) * kPlot, 2);
  s << "\"/>\n</svg>\n";
  return s.str();
}

inline std::string rate_text(const std::optional<double>& v) { return v ? fmt_fixed(*v, 3) : "undefined"; }

/// "AUC 0.750 | Sensitivity@0.5 0.650 | Specificity@0.5 0.800"
inline std::string summary_line(const EvalReport& r, double t = 0.5) {
  std::string line = "AUC " + fmt_fixed(r.auc, 3);
  for (const auto& op : r.operating_points)
    if (op.threshold == t) {
      const std::string ts = fmt_fixed(t, 1);
      line += " | Sensitivity@" + ts + " " + rate_text(op.rates.sensitivity) + " | Specificity@" + ts + " " +
              rate_text(op.rates.specificity);
    }
  return line;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

/// Reads report.json under `dir`, rewrites roc.svg and returns the summary line.
inline std::string emit_report(const std::filesystem::path& dir) {
  const auto path = dir / "report.json";
  if (!std::filesystem::exists(path)) throw IoError("no report.json in " + dir.string());
  EvalReport r;
  try {
    const auto j = detail::read_json_file(path);
    r = report_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report.json: " + std::string(e.what()));
  }
  if (r.roc.empty()) throw FormatError("report.json has no ROC points");
  write_text(dir / "roc.svg", roc_svg(r.roc, r.auc));
  return summary_line(r);
}

// ---------------------------------------------------------------------------
// Runner

struct RunOptions {
  std::ostream* log = nullptr;
  bool allow_large = false;
};

struct RunResult {
  EvalReport report;
  SplitManifest manifest;
  std::optional<StageResult> patch_stage;
  StageResult slice_stage;
  std::vector<double> test_scores;
  std::vector<int> test_labels;
};

namespace run_detail {

inline void logf(const RunOptions& o, const std::string& s) {
  if (o.log) *o.log << s << std::endl;
}

inline Dataset subset(const std::vector<SliceSample>& all, const SplitManifest& m, SplitSet set, std::size_t channels) {
  return make_dataset(select_set(all, m, set), channels);
}

}  // namespace run_detail

inline Cohort load_cohort(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  if (cfg.phantom) return generate_phantom_cohort(*cfg.phantom);
  auto res = ingest_cohort(*cfg.cohort_dir);
  for (const auto& w : res.warnings) run_detail::logf(opt, "warning: " + w);
  if (res.cohort.empty()) throw ValidationError("cohort directory " + *cfg.cohort_dir + " holds no patients");
  return std::move(res.cohort);
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  if (cfg.requires_note && !opt.allow_large)
    throw ConfigFieldError("requires", "config requires " + *cfg.requires_note + "; pass --allow-large to run it");
  fs::create_directories(out);
  const std::string config_hash = hash_config(cfg);
  write_text(out / "resolved_config.json", to_json(cfg).dump(2) + "\n");
  const auto log = [&](const std::string& s) { run_detail::logf(opt, s); };

  std::ofstream history(out / "history.jsonl", std::ios::binary);
  if (!history) throw IoError("cannot write history.jsonl");
  const auto history_sink = [&](const std::string& stage) {
    return [&, stage](const EpochRecord& r) {
      auto j = to_json(r);
      j["stage"] = stage;
      history << j.dump() << "\n";
      history.flush();
      log("  [" + stage + "] epoch " + std::to_string(r.epoch) + " train_loss " + fmt_fixed(r.train_loss, 4) +
          " val_loss " + fmt_fixed(r.val_loss, 4) + " val_auc " + fmt_fixed(r.val_auc, 4));
    };
  };

  RunResult res;
  const Modality src = cfg.source_modality, tgt = cfg.target_modality;
  const std::size_t channels = cfg.model.input_channels;

  const Cohort cohort = in_stage("data", [&] { return load_cohort(cfg, opt); });
  log("data: " + std::to_string(patient_cs_flags(cohort).size()) + " patients");

  std::vector<SliceSample> target_slices, source_slices;
  in_stage("preprocess", [&] {
    target_slices = prepare_slices(cohort, tgt, cfg.preprocess);
    if (cfg.uses_patches()) source_slices = src == tgt ? target_slices : prepare_slices(cohort, src, cfg.preprocess);
    if (target_slices.empty()) throw ValidationError("no lesion-bearing " + to_string(tgt) + " slices");
  });

  in_stage("split", [&] {
    res.manifest = stratified_patient_split(cohort, cfg.split, derive_seed(cfg.seed, "split"));
    res.manifest.counts = count_slices(res.manifest, target_slices, patient_cs_flags(cohort));
    write_manifest(out / "manifest.csv", res.manifest);
  });
  for (const auto& [set, c] : res.manifest.counts)
    log("split: " + to_string(set) + " patients " + std::to_string(c.patients) + " slices " + std::to_string(c.slices) +
        " (cS " + std::to_string(c.cs_slices) + ")");

  StageContext ctx{&res.manifest, config_hash, {}};
  std::optional<Checkpoint> patch_ckpt;
  if (cfg.uses_patches()) {
    Dataset ptrain, pval;
    in_stage("patch", [&] {
      const auto grid = make_grid(cfg.preprocess.canonical(src), cfg.patch->size);
      const auto train_src = select_set(source_slices, res.manifest, SplitSet::kTrain);
      std::vector<Cell> cells;
      if (cfg.patch->selection_k) cells = select_top_k(lesion_frequency_map(train_src, grid), *cfg.patch->selection_k);
      const auto train_patches = extract_patches(train_src, grid, cells);
      const auto val_patches = extract_patches(select_set(source_slices, res.manifest, SplitSet::kVal), grid, cells);
      if (cfg.patch->export_patches) {
        export_patches(out / "patches" / "train", train_patches);
        export_patches(out / "patches" / "val", val_patches);
      }
      ptrain = make_dataset(train_patches, channels);
      pval = make_dataset(val_patches, channels);
      log("patch: " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid, " +
          std::to_string(cells.empty() ? grid.cells() : cells.size()) + " cells, " + std::to_string(ptrain.size()) +
          " train / " + std::to_string(pval.size()) + " val patches");
    });
    in_stage("train:patch", [&] {
      TrainConfig tc = *cfg.patch_stage;
      tc.seed = derive_seed(cfg.seed, "stage/patch");
      Model model = build_model(cfg.model.backbone({cfg.patch->size, cfg.patch->size}), cfg.model.init,
                                derive_seed(cfg.seed, "init/patch"), cfg.model.asset);
      ctx.on_epoch = history_sink("patch");
      res.patch_stage = pretrain_on_patches(model, src, ptrain, pval, tc, ctx);
      save_checkpoint(out / "checkpoints" / "patch", res.patch_stage->checkpoint);
      patch_ckpt = res.patch_stage->checkpoint;
    });
  }

  const Dataset strain = run_detail::subset(target_slices, res.manifest, SplitSet::kTrain, channels);
  const Dataset sval = run_detail::subset(target_slices, res.manifest, SplitSet::kVal, channels);
  const Dataset stest = run_detail::subset(target_slices, res.manifest, SplitSet::kTest, channels);
  std::optional<Model> final_model;
  in_stage("train:slice", [&] {
    TrainConfig tc = cfg.slice_stage;
    tc.seed = derive_seed(cfg.seed, "stage/slice");
    const BackboneSpec spec = cfg.model.backbone(cfg.preprocess.canonical(tgt));
    ctx.on_epoch = history_sink("slice");
    if (cfg.protocol == Protocol::kSliceBaseline) {
      Model model = build_model(spec, cfg.model.init, derive_seed(cfg.seed, "init/slice"), cfg.model.asset);
      res.slice_stage = train_on_slices(model, tgt, strain, sval, tc, ctx);
      final_model.emplace(std::move(model));
    } else {
      auto tr = cfg.protocol == Protocol::kSelfTl ? self_transfer(*patch_ckpt, spec, tgt, strain, sval, tc, ctx)
                                                  : cross_transfer(*patch_ckpt, spec, tgt, strain, sval, tc, ctx);
      res.slice_stage = std::move(tr.stage);
      final_model.emplace(std::move(tr.model));
    }
    save_checkpoint(out / "checkpoints" / "slice", res.slice_stage.checkpoint);
  });

  in_stage("evaluate", [&] {
    res.test_scores = predict_all(*final_model, stest);
    res.test_labels = stest.labels;
    res.report = evaluate(res.test_scores, res.test_labels, cfg.thresholds);
    write_text(out / "report.json", to_json(res.report).dump(2) + "\n");
    write_text(out / "roc.svg", roc_svg(res.report.roc, res.report.auc));
  });
  log("test: " + summary_line(res.report));
  return res;
}

// ---------------------------------------------------------------------------
// Phantom export

struct PhantomSummary {
  std::size_t patients = 0;
  std::size_t cs_patients = 0;
  std::size_t lesions = 0;
  std::map<Modality, std::size_t> lesion_slices;
};

inline PhantomSummary make_phantom(const PhantomSpec& spec, const std::filesystem::path& out) {
  const Cohort cohort = generate_phantom_cohort(spec);
  write_cohort(out, cohort);
  PhantomSummary s;
  for (const auto& [id, cs] : patient_cs_flags(cohort)) {
    ++s.patients;
    s.cs_patients += cs;
  }
  for (const auto& item : cohort) {
    if (item.volume.modality == Modality::kT2W) s.lesions += item.masks.size();
    s.lesion_slices[item.volume.modality] += label_slices(item.volume, item.masks).size();
  }
  return s;
}

}  // namespace patchtl
