#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "patchtl/experiment.hpp"
#include "support.hpp"

using namespace patchtl;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

Result cli(const std::string& args, const TempDir& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(PATCHTL_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

nlohmann::json shipped(const std::string& name) {
  return nlohmann::json::parse(slurp(fs::path(PATCHTL_SOURCE_DIR) / "configs" / name));
}

// Small and fast: 24 patients at 64x64, two epochs per stage.
nlohmann::json small_config() {
  auto j = shipped("desk/self_tl_t2w.json");
  j["data"]["phantom"] = {{"n_patients", 24}, {"t2w_hw", {64, 64}}, {"adc_hw", {32, 32}}, {"n_slices", 6}, {"seed", 3}};
  j["patch"]["selection_k"] = 2;
  for (auto* s : {"patch", "slice"}) j["stages"][s]["max_epochs"] = 2;
  return j;
}

std::size_t count_substr(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  TempDir dir("cli_usage");
  EXPECT_EQ(cli("", dir).code, 2);
  EXPECT_EQ(cli("run", dir).code, 2);
  EXPECT_EQ(cli("frobnicate", dir).code, 2);
}

TEST(Cli, UnknownConfigKeyExitsTwoNamingIt) {
  TempDir dir("cli_badkey");
  auto j = small_config();
  j["patchh"] = {{"size", 32}};
  write_json(dir / "c.json", j);
  const auto r = cli("run --config " + (dir / "c.json").string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("patchh"), std::string::npos) << r.err;
}

TEST(Cli, LargeConfigRefusedWithoutFlag) {
  TempDir dir("cli_large");
  const auto cfg = fs::path(PATCHTL_SOURCE_DIR) / "configs/reference/self_tl_t2w_32.json";
  const auto r = cli("run --config " + cfg.string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("allow-large"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "o"));
}

TEST(Cli, RuntimeFailureExitsOneNamingStage) {
  TempDir dir("cli_runtime");
  auto j = small_config();
  j["data"] = {{"cohort_dir", (dir / "missing").string()}};
  write_json(dir / "c.json", j);
  const auto r = cli("run --config " + (dir / "c.json").string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("data"), std::string::npos) << r.err;
}

TEST(Cli, PhantomCommand) {
  TempDir dir("cli_phantom");
  write_json(dir / "spec.json", {{"n_patients", 10}, {"t2w_hw", {32, 32}}, {"adc_hw", {16, 16}}, {"n_slices", 4}, {"seed", 2}});
  const auto r = cli("phantom --spec " + (dir / "spec.json").string() + " --out " + (dir / "a").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("patients 10"), std::string::npos);
  std::size_t patients = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    if (!e.is_directory()) continue;
    ++patients;
    EXPECT_TRUE(fs::exists(e.path() / "T2W.ptnsr"));
    EXPECT_TRUE(fs::exists(e.path() / "ADC.ptnsr"));
  }
  EXPECT_EQ(patients, 10u);

  ASSERT_EQ(cli("phantom --spec " + (dir / "spec.json").string() + " --out " + (dir / "b").string(), dir).code, 0);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a"))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir / "a"));
  ASSERT_FALSE(files.empty());
  for (const auto& f : files) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;

  write_json(dir / "zero.json", {{"n_patients", 0}});
  EXPECT_EQ(cli("phantom --spec " + (dir / "zero.json").string() + " --out " + (dir / "c").string(), dir).code, 2);
}

TEST(Cli, ReportFormattingAndSvg) {
  TempDir dir("cli_report");
  fs::create_directories(dir / "run");
  const std::vector<double> s{0.9, 0.4, 0.6, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  const auto rep = evaluate(s, y);
  ASSERT_DOUBLE_EQ(rep.auc, 0.75);
  write_json(dir / "run/report.json", to_json(rep));
  const auto r = cli("report " + (dir / "run").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("AUC 0.750"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("Sensitivity@0.5 0.500"), std::string::npos) << r.out;

  const std::string svg = slurp(dir / "run/roc.svg");
  EXPECT_EQ(count_substr(svg, "<polyline"), 1u);
  const std::smatch m = [&] {
    std::smatch mm;
    std::regex_search(svg, mm, std::regex("<polyline[^>]*points=\"([^\"]*)\""));
    return mm;
  }();
  ASSERT_FALSE(m.empty());
  std::istringstream pts(m[1].str());
  std::size_t n = 0;
  for (std::string tok; pts >> tok;) ++n;
  EXPECT_EQ(n, rep.roc.size());
  EXPECT_NE(svg.find("FPR"), std::string::npos);
  EXPECT_NE(svg.find("TPR"), std::string::npos);
}

TEST(Cli, ReportErrorsExitOne) {
  TempDir dir("cli_report_err");
  fs::create_directories(dir / "empty");
  EXPECT_EQ(cli("report " + (dir / "empty").string(), dir).code, 1);
  fs::create_directories(dir / "noroc");
  write_json(dir / "noroc/report.json", {{"auc", 0.5}, {"operating_points", nlohmann::json::array()}});
  EXPECT_EQ(cli("report " + (dir / "noroc").string(), dir).code, 1);
}

TEST(Cli, RunIsDeterministicAndReproducibleFromResolvedConfig) {
  TempDir dir("cli_det");
  write_json(dir / "c.json", small_config());
  const auto c = (dir / "c.json").string();
  ASSERT_EQ(cli("run --config " + c + " --out " + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(cli("run --config " + c + " --out " + (dir / "b").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "a/report.json"), slurp(dir / "b/report.json"));
  EXPECT_EQ(slurp(dir / "a/history.jsonl"), slurp(dir / "b/history.jsonl"));
  const auto resolved = (dir / "a/resolved_config.json").string();
  ASSERT_EQ(cli("run --config " + resolved + " --out " + (dir / "r").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "a/report.json"), slurp(dir / "r/report.json"));
  // A different seed changes the run.
  ASSERT_EQ(cli("run --config " + c + " --seed 5 --out " + (dir / "s").string(), dir).code, 0);
  EXPECT_NE(slurp(dir / "a/history.jsonl"), slurp(dir / "s/history.jsonl"));
}

// The shipped self-TL config on a 100-patient phantom, epochs shortened.
TEST(Cli, DeskSmokeRunWritesAllArtifacts) {
  TempDir dir("cli_smoke");
  auto j = shipped("desk/self_tl_t2w.json");
  j["data"]["phantom"]["n_patients"] = 100;
  j["patch"]["export"] = true;
  for (auto* s : {"patch", "slice"}) j["stages"][s]["max_epochs"] = 2;
  write_json(dir / "c.json", j);
  const auto r = cli("run --config " + (dir / "c.json").string() + " --out " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("AUC "), std::string::npos);
  for (const char* f : {"resolved_config.json", "history.jsonl", "manifest.csv", "manifest.json", "report.json",
                        "roc.svg", "checkpoints/patch/meta.json", "checkpoints/slice/meta.json",
                        "patches/train/index.csv", "patches/val/index.csv"})
    EXPECT_TRUE(fs::exists(dir / "o" / f)) << f;
  const auto rep = nlohmann::json::parse(slurp(dir / "o/report.json"));
  const double auc = rep.at("auc").get<double>();
  EXPECT_GE(auc, 0.0);
  EXPECT_LE(auc, 1.0);
  const auto meta = nlohmann::json::parse(slurp(dir / "o/checkpoints/slice/meta.json"));
  EXPECT_EQ(meta.at("domain"), "slice");
  EXPECT_TRUE(meta.contains("source_checkpoint_hash"));
  // Nothing is written outside the output directory.
  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(dir.path())) top.insert(e.path().filename().string());
  EXPECT_EQ(top, (std::set<std::string>{"c.json", "o", "stdout.txt", "stderr.txt"}));
}
