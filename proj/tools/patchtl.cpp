// patchtl: run experiments, generate phantom cohorts, summarize reports.
//
// Exit codes: 0 success, 1 runtime failure (stage named), 2 invalid input
// (field named).

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "patchtl/patchtl.hpp"

namespace {

int fail(int code, const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return code;
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, std::optional<std::string> out,
            bool allow_large) {
  patchtl::ExperimentConfig cfg;
  try {
    cfg = patchtl::load_experiment_config(config_path);
  } catch (const patchtl::IoError& e) {
    return fail(2, e.what());
  } catch (const patchtl::Error& e) {
    return fail(2, std::string("invalid config: ") + e.what());
  }
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  patchtl::RunOptions opt{&std::cerr, allow_large};
  try {
    const auto res = patchtl::run_experiment(cfg, cfg.output_dir, opt);
    std::cout << patchtl::summary_line(res.report) << "\n";
  } catch (const patchtl::ConfigFieldError& e) {
    return fail(2, std::string("invalid config: ") + e.what());
  } catch (const patchtl::StageError& e) {
    return fail(1, "stage " + std::string(e.what()));
  } catch (const std::exception& e) {
    return fail(1, std::string("stage setup: ") + e.what());
  }
  return 0;
}

int cmd_phantom(const std::string& spec_path, const std::string& out) {
  patchtl::PhantomSpec spec;
  try {
    spec = patchtl::phantom_from_json(patchtl::detail::read_json_file(spec_path));
  } catch (const std::exception& e) {
    return fail(2, std::string("invalid phantom spec: ") + e.what());
  }
  try {
    const auto s = patchtl::make_phantom(spec, out);
    std::cout << "patients " << s.patients << " (cS " << s.cs_patients << ")"
              << " | lesions " << s.lesions << " | lesion slices T2W "
              << s.lesion_slices.at(patchtl::Modality::kT2W) << " ADC " << s.lesion_slices.at(patchtl::Modality::kADC) << "\n";
  } catch (const std::exception& e) {
    return fail(1, std::string("stage phantom: ") + e.what());
  }
  return 0;
}

int cmd_report(const std::string& dir) {
  try {
    std::cout << patchtl::emit_report(dir) << "\n";
  } catch (const std::exception& e) {
    return fail(1, std::string("stage report: ") + e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Execution is always deterministic; the variable is accepted for compatibility.
  if (const char* d = std::getenv("PATCHTL_DETERMINISTIC"); d && std::string(d) != "0" && std::string(d) != "1")
    std::cerr << "warning: PATCHTL_DETERMINISTIC should be 0 or 1\n";

  CLI::App app{"Patch-based transfer learning for MRI slice triage"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment config end to end");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool allow_large = false;
  run->add_option("--config", config_path, "Experiment config JSON")->required();
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out, "Override the output directory");
  run->add_flag("--allow-large", allow_large, "Permit configs that need the external dataset and an accelerator");

  auto* phantom = app.add_subcommand("phantom", "Write a synthetic cohort");
  std::string spec_path, phantom_out;
  phantom->add_option("--spec", spec_path, "Phantom spec JSON")->required();
  phantom->add_option("--out", phantom_out, "Cohort directory")->required();

  auto* report = app.add_subcommand("report", "Summarize report.json and redraw roc.svg");
  std::string report_dir;
  report->add_option("dir", report_dir, "Run output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*run) return cmd_run(config_path, seed, out, allow_large);
  if (*phantom) return cmd_phantom(spec_path, phantom_out);
  return cmd_report(report_dir);
}
