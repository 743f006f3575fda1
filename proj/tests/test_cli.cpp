#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "xsurv/data.hpp"
#include "xsurv/run_config.hpp"
#include "xsurv/statmodels.hpp"

namespace fs = std::filesystem;
using namespace xsurv;

namespace {

struct CmdResult {
  int rc;
  std::string out;
};

CmdResult run(const std::string& args, const std::string& env = "XSURV_THREADS=1") {
  const std::string cmd = env + " " + XSURV_CLI + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

double metric(const std::string& out, const std::string& name) {
  std::smatch m;
  if (!std::regex_search(out, m, std::regex(name + "=([-0-9.naif]+)"))) return -1e9;
  return std::stod(m[1]);
}

Json smoke_config(const fs::path& root) {
  return Json{{"model", {{"preset", "tiny"}}},
              {"train",
               {{"total_iters", 20}, {"validate_every", 10}, {"crop", 16}, {"lr_stages", {{0, 1e-3}}}, {"augment", false}}},
              {"phantom", {{"grid", 40}, {"seed", 3}}},
              {"data", {{"n_train", 12}, {"n_test", 6}, {"out_side", 20}, {"spacing_mm", 2.0}, {"val_fraction", 0.0}}},
              {"paths", {{"data_dir", (root / "data").string()}, {"run_dir", (root / "run").string()}}}};
}

fs::path write_config(const fs::path& dir, const Json& j, const std::string& name = "config.json") {
  fs::create_directories(dir);
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

}  // namespace

// One generated dataset and one short training run shared by the suite.
class Cli : public ::testing::Test {
 protected:
  static inline fs::path root, cfg;
  static inline CmdResult trained;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("xsurv_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    cfg = write_config(root, smoke_config(root));
    ASSERT_EQ(run("phantom-gen --config " + cfg.string()).rc, 0);
    trained = run("train --config " + cfg.string());
    ASSERT_EQ(trained.rc, 0) << trained.out;
  }
  static void TearDownTestSuite() { fs::remove_all(root); }
};

TEST_F(Cli, PhantomGenManifestAndResolvedConfig) {
  const auto rows = read_manifest((root / "data" / "manifest.tsv").string());
  EXPECT_EQ(rows.size(), 18u);
  EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [](const ManifestRow& r) { return r.split == "train"; }), 12);
  const auto resolved = RunConfig::load(root / "data" / "run_config.json");
  EXPECT_EQ(resolved.to_json(), RunConfig::load(cfg).to_json());
}

TEST_F(Cli, PhantomGenIsDeterministic) {
  const auto again = root / "again";
  ASSERT_EQ(run("phantom-gen --config " + cfg.string() + " --out " + again.string()).rc, 0);
  for (const auto& e : fs::directory_iterator(root / "data")) {
    if (e.path().filename() == "run_config.json") continue;
    EXPECT_EQ(slurp(e.path()), slurp(again / e.path().filename())) << e.path();
  }
  const auto other = root / "other_seed";
  ASSERT_EQ(run("phantom-gen --config " + cfg.string() + " --seed 99 --out " + other.string()).rc, 0);
  EXPECT_NE(slurp(root / "data" / "P0000_pet.vol"), slurp(other / "P0000_pet.vol"));
  EXPECT_EQ(RunConfig::load(other / "run_config.json").phantom.seed, 99u);
}

TEST_F(Cli, RefusesNonEmptyOutputWithoutForce) {
  const auto r = run("phantom-gen --config " + cfg.string());
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.out.find("--force"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").rc, 1);
  EXPECT_EQ(run("nonsense").rc, 1);
  EXPECT_EQ(run("train").rc, 1);
  auto j = smoke_config(root);
  j["train"]["learning_rate"] = 0.1;
  const auto r = run("train --config " + write_config(root / "bad", j).string());
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.out.find("unknown key 'learning_rate'"), std::string::npos) << r.out;
}

TEST_F(Cli, CensoringFractionNearTarget) {
  auto j = smoke_config(root / "cens");
  j["data"]["n_train"] = 160;
  j["data"]["n_test"] = 40;
  j["phantom"]["grid"] = 36;
  j["phantom"]["censor_fraction"] = 0.3;
  const auto r = run("phantom-gen --config " + write_config(root / "cens", j).string(), "");
  ASSERT_EQ(r.rc, 0) << r.out;
  const auto rows = read_manifest((root / "cens" / "data" / "manifest.tsv").string());
  ASSERT_EQ(rows.size(), 200u);
  const double frac =
      static_cast<double>(std::count_if(rows.begin(), rows.end(), [](const ManifestRow& x) { return x.record.censored; })) / 200.0;
  EXPECT_NEAR(frac, 0.3, 0.1);
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex("censored fraction ([0-9.]+)")));
  EXPECT_NEAR(std::stod(m[1]), frac, 1e-6);
}

TEST_F(Cli, EvalReproducesTrainLog) {
  const auto log = read_metric_log(root / "run" / "metrics.tsv");
  ASSERT_EQ(log.size(), 2u);
  const auto best = *std::max_element(log.begin(), log.end(),
                                      [](const LogRow& a, const LogRow& b) { return a.val.cindex < b.val.cindex; });
  const auto r = run("eval --config " + cfg.string() + " --split train");
  ASSERT_EQ(r.rc, 0) << r.out;
  for (const char* k : {"cindex", "dsc_pt", "dsc_mln"}) EXPECT_NE(r.out.find(std::string(k) + "="), std::string::npos);
  EXPECT_NEAR(metric(r.out, "cindex"), best.val.cindex, 1e-4);
  EXPECT_NEAR(metric(r.out, "dsc_pt"), best.val.dsc_pt, 1e-4);
  EXPECT_NEAR(metric(r.out, "dsc_mln"), best.val.dsc_mln, 1e-4);
  EXPECT_TRUE(fs::exists(root / "run" / "eval_train" / "run_config.json"));
}

TEST_F(Cli, InferAttentionSumsToOne) {
  const auto out = root / "infer";
  const auto r = run("infer --config " + cfg.string() + " --patient P0002 --out " + out.string());
  ASSERT_EQ(r.rc, 0) << r.out;
  for (const char* f : {"pt_prob.vol", "mln_prob.vol", "rfs.json", "run_config.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  int scales = 0;
  for (int s = 0; fs::exists(out / ("attention_s" + std::to_string(s) + "_pt.vol")); ++s, ++scales) {
    const auto p = [&](const char* k) { return load_volume((out / ("attention_s" + std::to_string(s) + "_" + k + ".vol")).string()); };
    const auto a = p("pt"), b = p("mln"), c = p("bg");
    double worst = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) + b.data[i] + c.data[i] - 1.0));
    EXPECT_LT(worst, 1e-5) << "scale " << s;
  }
  EXPECT_EQ(scales, 4);
  EXPECT_EQ(run("infer --config " + cfg.string() + " --patient NOPE --out " + (root / "x").string()).rc, 1);
}

TEST_F(Cli, RadiomicsAndEnhance) {
  ASSERT_EQ(run("eval --config " + cfg.string() + " --split all").rc, 0);
  const auto a = run("radiomics --config " + cfg.string());
  ASSERT_EQ(a.rc, 0) << a.out;
  const auto b = run("radiomics --config " + cfg.string() + " --out " + (root / "rad2").string(), "XSURV_THREADS=3");
  ASSERT_EQ(b.rc, 0) << b.out;
  const auto f1 = root / "run" / "radiomics" / "features.tsv";
  EXPECT_EQ(slurp(f1), slurp(root / "rad2" / "features.tsv"));
  const auto fm = read_feature_matrix(f1.string());
  EXPECT_EQ(fm.rows(), 18);
  EXPECT_EQ(fm.cols(), 212);
  const auto e = run("enhance --config " + cfg.string());
  ASSERT_EQ(e.rc, 0) << e.out;
  EXPECT_TRUE(std::regex_search(e.out, std::regex("base_cindex=[0-9.]+ enhanced_cindex=[0-9.]+")));
}

TEST_F(Cli, CheckpointMismatchIsReported) {
  auto j = smoke_config(root);
  j["model"]["surv_hidden"] = 32;
  const auto r = run("eval --config " + write_config(root / "mismatch", j).string() + " --out " + (root / "mm").string());
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.out.find("head.surv.fc1"), std::string::npos) << r.out;
}

TEST_F(Cli, TrainingIsDeterministic) {
  const auto out = root / "run2";
  const auto r = run("train --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(r.rc, 0) << r.out;
  EXPECT_EQ(slurp(root / "run" / "metrics.tsv"), slurp(out / "metrics.tsv"));
  const auto resolved = RunConfig::load(out / "run_config.json");
  EXPECT_EQ(resolved.paths.run_dir, out.string());
}

TEST_F(Cli, NumericalFailureExitCode) {
  auto j = smoke_config(root / "blowup");
  j["paths"]["data_dir"] = (root / "data").string();
  j["train"]["lr_stages"] = Json::array({Json::array({0, 1e30})});
  const auto r = run("train --config " + write_config(root / "blowup", j).string());
  EXPECT_EQ(r.rc, 2) << r.out;
}

TEST(CliGradcheck, ScopesAndNegativeControl) {
  const auto ok = run("gradcheck --scope op");
  EXPECT_EQ(ok.rc, 0) << ok.out;
  const auto bad = run("gradcheck --scope op --corrupt");
  EXPECT_EQ(bad.rc, 2);
  EXPECT_NE(bad.out.find("FAIL corrupted_sigmoid"), std::string::npos);
  EXPECT_EQ(run("gradcheck --scope everything").rc, 1);
}
