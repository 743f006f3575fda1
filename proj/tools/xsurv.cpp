// xsurv: phantom generation, training, evaluation, inference, radiomics
// enhancement and gradient checks from one config file.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "xsurv/gradcheck_suite.hpp"
#include "xsurv/pipeline.hpp"
#include "xsurv/run_config.hpp"

namespace fs = std::filesystem;
using namespace xsurv;

namespace {

constexpr int kUsage = 1;
constexpr int kNumerical = 2;

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  bool force = false;
  std::string out;
};

void add_common(CLI::App* c, Common& o, bool need_config = true) {
  auto* opt = c->add_option("--config", o.config, "run config (JSON)");
  if (need_config) opt->required()->check(CLI::ExistingFile);
  c->add_option("--seed", o.seed, "override the seed");
  c->add_flag("--force", o.force, "overwrite a non-empty output directory");
  c->add_option("--out", o.out, "output location");
}

void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " exists and is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.6f", v);
  return b;
}

struct Loaded {
  RunConfig cfg;
  std::vector<ManifestRow> rows;
};

Loaded load_manifest(const Common& o) {
  Loaded l{RunConfig::load(o.config), {}};
  l.rows = read_manifest((fs::path(l.cfg.paths.data_dir) / "manifest.tsv").string());
  return l;
}

// Model from the config with checkpoint weights; mismatches list every
// differing tensor.
std::unique_ptr<XSurvModel<float>> load_model(const RunConfig& cfg, const fs::path& ckpt, IntervalScheme& scheme) {
  auto model = std::make_unique<XSurvModel<float>>(cfg.model);
  const auto meta = load_checkpoint(ckpt.string(), *model);
  if (!meta.contains("edges")) throw UsageError(ckpt.string() + " has no interval edges; not a training checkpoint");
  scheme.edges = meta.at("edges").get<std::vector<double>>();
  return model;
}

fs::path checkpoint_or_default(const std::string& given, const RunConfig& cfg) {
  return given.empty() ? fs::path(cfg.paths.run_dir) / "best.ckpt" : fs::path(given);
}

int cmd_phantom_gen(const Common& o) {
  auto cfg = RunConfig::load(o.config);
  if (o.seed) cfg.phantom.seed = *o.seed;
  if (!o.out.empty()) cfg.paths.data_dir = fs::absolute(o.out).lexically_normal().string();
  const fs::path dir = cfg.paths.data_dir;
  prepare_dir(dir, o.force);
  const auto cal = calibrate_phantoms(cfg.phantom);
  const int64_t n = cfg.data.n_train + cfg.data.n_test;
  std::vector<ManifestRow> rows(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    const auto p = generate_phantom(cfg.phantom, static_cast<uint64_t>(i), cal);
    char id[16];
    std::snprintf(id, sizeof id, "P%04lld", static_cast<long long>(i));
    auto& r = rows[static_cast<size_t>(i)];
    r.id = id;
    r.split = i < cfg.data.n_train ? "train" : "test";
    r.pet = r.id + "_pet.vol";
    r.ct = r.id + "_ct.vol";
    r.pt_mask = r.id + "_pt.vol";
    r.mln_mask = r.id + "_mln.vol";
    save_volume((dir / r.pet).string(), p.pet);
    save_volume((dir / r.ct).string(), p.ct);
    save_volume((dir / r.pt_mask).string(), p.pt_mask);
    save_volume((dir / r.mln_mask).string(), p.mln_mask);
    r.clinical = p.draw.clinical;
    r.record = p.draw.record;
    r.center = p.draw.pt.center;
  });
  write_manifest((dir / "manifest.tsv").string(), rows);
  cfg.save(dir / "run_config.json");
  const auto censored = std::count_if(rows.begin(), rows.end(), [](const ManifestRow& r) { return r.record.censored; });
  std::cout << "phantom-gen: " << cfg.data.n_train << " train / " << cfg.data.n_test << " test, censored fraction "
            << fmt(static_cast<double>(censored) / static_cast<double>(n)) << " (target " << fmt(cfg.phantom.censor_fraction)
            << ") -> " << dir.string() << "\n";
  return 0;
}

int cmd_train(const Common& o) {
  auto [cfg, rows] = load_manifest(o);
  if (o.seed) cfg.train.seed = *o.seed;
  if (!o.out.empty()) cfg.paths.run_dir = fs::absolute(o.out).lexically_normal().string();
  const fs::path dir = cfg.paths.run_dir;
  prepare_dir(dir, o.force);
  cfg.save(dir / "run_config.json");
  const auto all = load_dataset(rows, "train", cfg.paths.data_dir, cfg.data.preprocess());
  const auto [tr, va] = split_validation(all, cfg.data.val_fraction);
  std::cout << "train: " << tr.size() << " patients, validation " << va.size() << ", " << cfg.train.total_iters
            << " iterations\n";
  XSurvModel<float> model(cfg.model, cfg.train.seed);
  const auto res = train(model, tr, va, cfg.train, dir, &std::cout);
  std::cout << "best: iter " << res.best_iter << " val_cindex " << fmt(res.best_cindex) << " -> "
            << res.best_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const Common& o, const std::string& ckpt_arg, const std::string& split) {
  auto [cfg, rows] = load_manifest(o);
  if (split != "train" && split != "test" && split != "all") throw UsageError("--split must be train, test or all");
  const auto ckpt = checkpoint_or_default(ckpt_arg, cfg);
  IntervalScheme scheme;
  auto model = load_model(cfg, ckpt, scheme);
  const auto data = load_dataset(rows, split == "all" ? "" : split, cfg.paths.data_dir, cfg.data.preprocess());
  if (data.size() == 0) throw UsageError("no patients in split " + split);
  const auto pred = predict(*model, data, scheme, cfg.train.crop);
  const auto m = evaluate(pred, data, cfg.train.crop);
  const fs::path dir = o.out.empty() ? fs::path(cfg.paths.run_dir) / ("eval_" + split) : fs::path(o.out);
  prepare_dir(dir, o.force);
  cfg.save(dir / "run_config.json");
  std::ofstream f(dir / "scores.tsv");
  f << "id\tsplit\tscore\n";
  f.precision(17);
  std::map<std::string, std::string> split_of;
  for (const auto& r : rows) split_of[r.id] = r.split;
  for (size_t i = 0; i < data.size(); ++i) f << data.ids[i] << '\t' << split_of[data.ids[i]] << '\t' << pred.scores[i] << '\n';
  std::cout << "cindex=" << fmt(m.cindex) << " dsc_pt=" << fmt(m.dsc_pt) << " dsc_mln=" << fmt(m.dsc_mln)
            << " n=" << data.size() << " split=" << split << "\n";
  return 0;
}

int cmd_infer(const Common& o, const std::string& ckpt_arg, const std::string& patient) {
  auto [cfg, rows] = load_manifest(o);
  const auto it = std::find_if(rows.begin(), rows.end(), [&](const ManifestRow& r) { return r.id == patient; });
  if (it == rows.end()) throw UsageError("no patient '" + patient + "' in the manifest");
  IntervalScheme scheme;
  auto model = load_model(cfg, checkpoint_or_default(ckpt_arg, cfg), scheme);
  const auto data = load_dataset({*it}, "", cfg.paths.data_dir, cfg.data.preprocess());
  const auto pred = predict(*model, data, scheme, cfg.train.crop, true);
  const fs::path dir = o.out.empty() ? fs::path(cfg.paths.run_dir) / ("infer_" + patient) : fs::path(o.out);
  prepare_dir(dir, o.force);
  cfg.save(dir / "run_config.json");
  if (!pred.pt_prob.empty()) save_volume((dir / "pt_prob.vol").string(), pred.pt_prob[0]);
  if (!pred.mln_prob.empty()) save_volume((dir / "mln_prob.vol").string(), pred.mln_prob[0]);
  const auto& att = pred.attention[0];
  static const char* kind[] = {"pt", "mln", "bg"};
  for (size_t k = 0; k < att.size(); ++k)
    if (att[k].size() > 0)
      save_volume((dir / ("attention_s" + std::to_string(k / 3) + "_" + kind[k % 3] + ".vol")).string(), att[k]);
  std::ofstream(dir / "rfs.json") << Json{{"id", patient}, {"rfs_days", pred.scores[0]}, {"s_pred", pred.s_pred[0]}}.dump(2)
                                  << '\n';
  std::cout << "infer: " << patient << " rfs_days=" << fmt(pred.scores[0]) << " -> " << dir.string() << "\n";
  return 0;
}

int cmd_radiomics(const Common& o, const std::string& ckpt_arg) {
  auto [cfg, rows] = load_manifest(o);
  IntervalScheme scheme;
  auto model = load_model(cfg, checkpoint_or_default(ckpt_arg, cfg), scheme);
  const auto data = load_dataset(rows, "", cfg.paths.data_dir, cfg.data.preprocess());
  const auto pred = predict(*model, data, scheme, cfg.train.crop);
  const auto feats = predicted_radiomics(pred, data, cfg.train.crop);
  const fs::path dir = o.out.empty() ? fs::path(cfg.paths.run_dir) / "radiomics" : fs::path(o.out);
  prepare_dir(dir, o.force);
  cfg.save(dir / "run_config.json");
  write_feature_matrix((dir / "features.tsv").string(), feats);
  std::cout << "radiomics: " << feats.rows() << " patients x " << feats.cols() << " features -> "
            << (dir / "features.tsv").string() << "\n";
  return 0;
}

int cmd_enhance(const Common& o, std::string features, std::string scores) {
  auto [cfg, rows] = load_manifest(o);
  const fs::path run = cfg.paths.run_dir;
  if (features.empty()) features = (run / "radiomics" / "features.tsv").string();
  if (scores.empty()) scores = (run / "eval_all" / "scores.tsv").string();
  const auto fm = read_feature_matrix(features);
  std::map<std::string, double> score_of;
  {
    std::ifstream f(scores);
    if (!f) throw UsageError("cannot open scores " + scores);
    std::string line;
    std::getline(f, line);
    if (line != "id\tsplit\tscore") throw UsageError(scores + ": unexpected header");
    while (std::getline(f, line)) {
      const auto c = split_tabs(line);
      if (c.size() == 3) score_of[c[0]] = std::stod(c[2]);
    }
  }
  std::map<std::string, int64_t> feat_row;
  for (size_t i = 0; i < fm.ids.size(); ++i) feat_row[fm.ids[i]] = static_cast<int64_t>(i);
  std::vector<std::string> ids;
  std::vector<ClinicalRow> clin;
  std::vector<SurvivalRecord> rec;
  std::vector<double> base;
  std::vector<int64_t> fit, ev, order;
  for (const auto& r : rows) {
    if (!score_of.count(r.id) || !feat_row.count(r.id))
      throw UsageError("patient " + r.id + " is missing from the scores or the feature file");
    (r.split == "train" ? fit : ev).push_back(static_cast<int64_t>(ids.size()));
    ids.push_back(r.id);
    clin.push_back(r.clinical);
    rec.push_back(r.record);
    base.push_back(score_of[r.id]);
    order.push_back(feat_row[r.id]);
  }
  if (ev.empty()) throw UsageError("enhance needs test patients to report on");
  auto rad = fm.take_rows(order);
  const auto rep = enhance_pipeline(base, rad, clinical_matrix(ids, clin), rec, fit, ev, cfg.train.seed);
  const fs::path dir = o.out.empty() ? run / "enhance" : fs::path(o.out);
  prepare_dir(dir, o.force);
  cfg.save(dir / "run_config.json");
  std::ofstream f(dir / "enhanced_scores.tsv");
  f << "id\tsplit\tbase\tenhanced\n";
  f.precision(17);
  for (size_t i = 0; i < ids.size(); ++i) f << ids[i] << '\t' << rows[i].split << '\t' << base[i] << '\t' << rep.scores[i] << '\n';
  std::ofstream(dir / "selected.json") << Json{{"clinical", rep.clinical}, {"radiomics", rep.radiomics}}.dump(2) << '\n';
  std::cout << "enhance: base_cindex=" << fmt(rep.base_cindex) << " enhanced_cindex=" << fmt(rep.enhanced_cindex)
            << " n_test=" << ev.size() << " clinical=" << rep.clinical.size() << " radiomics=" << rep.radiomics.size()
            << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& scope, bool corrupt) {
  std::vector<gradsuite::Entry> es;
  if (scope == "op")
    for (int i = 0; i < 5; ++i)
      for (auto& e : gradsuite::op_suite(i)) es.push_back({e.name + "#" + std::to_string(i), e.rep});
  else if (scope == "block")
    for (int i = 0; i < 5; ++i)
      for (auto& e : gradsuite::block_suite(i)) es.push_back({e.name + "#" + std::to_string(i), e.rep});
  else if (scope == "model")
    es = gradsuite::model_suite();
  else
    throw UsageError("--scope must be op, block or model");
  if (corrupt) es.push_back(gradsuite::corrupted_op());
  int failed = 0;
  for (const auto& e : es) {
    if (!e.rep.pass) {
      ++failed;
      std::cout << "FAIL " << e.name << " max_rel_err=" << e.rep.max_rel_err << " at " << e.rep.worst << "\n";
    }
  }
  double worst = 0.0;
  for (const auto& e : es) worst = std::max(worst, e.rep.max_rel_err);
  std::cout << "gradcheck " << scope << ": " << es.size() - static_cast<size_t>(failed) << "/" << es.size()
            << " passed, worst max_rel_err " << worst << "\n";
  return failed ? kNumerical : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"XSurv: joint PT/MLN segmentation and survival prediction"};
  app.require_subcommand(1);
  Common o;
  std::string ckpt, split = "test", patient, features, scores, scope = "op";
  bool corrupt = false;

  auto* gen = app.add_subcommand("phantom-gen", "render synthetic PET/CT phantoms and a manifest");
  add_common(gen, o);
  auto* tr = app.add_subcommand("train", "train on the manifest's train split");
  add_common(tr, o);
  auto* ev = app.add_subcommand("eval", "C-index and Dice on a split");
  add_common(ev, o);
  ev->add_option("--checkpoint", ckpt, "checkpoint (default <run_dir>/best.ckpt)");
  ev->add_option("--split", split, "train | test | all");
  auto* inf = app.add_subcommand("infer", "probability, RFS and attention volumes for one patient");
  add_common(inf, o);
  inf->add_option("--checkpoint", ckpt, "checkpoint (default <run_dir>/best.ckpt)");
  inf->add_option("--patient", patient, "manifest id")->required();
  auto* rad = app.add_subcommand("radiomics", "features from predicted lesion masks");
  add_common(rad, o);
  rad->add_option("--checkpoint", ckpt, "checkpoint (default <run_dir>/best.ckpt)");
  auto* enh = app.add_subcommand("enhance", "Cox enhancement with clinical and radiomics features");
  add_common(enh, o);
  enh->add_option("--features", features, "radiomics feature matrix (default <run_dir>/radiomics/features.tsv)");
  enh->add_option("--scores", scores, "scores from eval --split all (default <run_dir>/eval_all/scores.tsv)");
  auto* gc = app.add_subcommand("gradcheck", "64-bit finite-difference suites");
  add_common(gc, o, false);
  gc->add_option("--scope", scope, "op | block | model");
  gc->add_flag("--corrupt", corrupt, "add a deliberately wrong backward rule (must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }
  try {
    if (*gen) return cmd_phantom_gen(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_eval(o, ckpt, split);
    if (*inf) return cmd_infer(o, ckpt, patient);
    if (*rad) return cmd_radiomics(o, ckpt);
    if (*enh) return cmd_enhance(o, features, scores);
    if (*gc) return cmd_gradcheck(scope, corrupt);
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
