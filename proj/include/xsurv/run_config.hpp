#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "xsurv/data.hpp"
#include "xsurv/model.hpp"
#include "xsurv/trainer.hpp"

namespace xsurv {

struct DataConfig {
  int64_t n_train = 79;
  int64_t n_test = 21;
  int64_t out_side = 40;
  double spacing_mm = 1.0;
  double ct_clip = 1024.0;
  // Tail of the train split held out for checkpoint selection; 0 validates
  // on the training patients themselves.
  double val_fraction = 0.2;

  void validate() const {
    if (n_train < 1 || n_test < 0) throw Error("data: n_train must be >= 1 and n_test >= 0");
    if (out_side < 1) throw Error("data: out_side must be positive");
    if (!(spacing_mm > 0.0)) throw Error("data: spacing_mm must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error("data: val_fraction must be in [0, 1)");
  }

  PreprocessOptions preprocess() const { return {out_side, ct_clip, spacing_mm}; }

  Json to_json() const {
    return {{"n_train", n_train},       {"n_test", n_test},   {"out_side", out_side},
            {"spacing_mm", spacing_mm}, {"ct_clip", ct_clip}, {"val_fraction", val_fraction}};
  }

  static DataConfig from_json(const Json& j) {
    detail::reject_unknown_keys(j, {"n_train", "n_test", "out_side", "spacing_mm", "ct_clip", "val_fraction"}, "data");
    DataConfig c;
    detail::read_if(j, "n_train", c.n_train);
    detail::read_if(j, "n_test", c.n_test);
    detail::read_if(j, "out_side", c.out_side);
    detail::read_if(j, "spacing_mm", c.spacing_mm);
    detail::read_if(j, "ct_clip", c.ct_clip);
    detail::read_if(j, "val_fraction", c.val_fraction);
    c.validate();
    return c;
  }
};

struct PathsConfig {
  std::string data_dir = "data/phantoms";
  std::string run_dir = "runs/default";

  Json to_json() const { return {{"data_dir", data_dir}, {"run_dir", run_dir}}; }

  static PathsConfig from_json(const Json& j) {
    detail::reject_unknown_keys(j, {"data_dir", "run_dir"}, "paths");
    PathsConfig c;
    detail::read_if(j, "data_dir", c.data_dir);
    detail::read_if(j, "run_dir", c.run_dir);
    return c;
  }
};

// Model section: with "preset" (default | tiny) the preset is taken, the
// ablation applied through ablation_config, and remaining keys override.
// Without it the section is a literal ModelConfig.
inline ModelConfig model_config_from_json(const Json& j) {
  if (!j.is_object()) throw Error("model: expected an object");
  if (!j.contains("preset")) return ModelConfig::from_json(j);
  const auto preset = j.at("preset").get<std::string>();
  ModelConfig base;
  if (preset == "tiny")
    base = tiny_config();
  else if (preset != "default")
    throw Error("model: unknown preset '" + preset + "' (expected default or tiny)");
  if (j.contains("ablation")) base = ablation_config(base, parse_ablation(j.at("ablation").get<std::string>()));
  Json merged = base.to_json();
  for (const auto& [k, v] : j.items())
    if (k != "preset" && k != "ablation") merged[k] = v;
  return ModelConfig::from_json(merged);
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PhantomSpec phantom;
  DataConfig data;
  PathsConfig paths;

  Json to_json() const {
    return {{"model", model.to_json()},
            {"train", train.to_json()},
            {"phantom", phantom.to_json()},
            {"data", data.to_json()},
            {"paths", paths.to_json()}};
  }

  static RunConfig from_json(const Json& j) {
    detail::reject_unknown_keys(j, {"model", "train", "phantom", "data", "paths"}, "config");
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("phantom")) c.phantom = PhantomSpec::from_json(j.at("phantom"));
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("paths")) c.paths = PathsConfig::from_json(j.at("paths"));
    return c;
  }

  // Relative paths resolve against the working directory.
  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config " + path.string());
    Json j;
    try {
      j = Json::parse(f);
    } catch (const Json::exception& e) {
      throw Error("config " + path.string() + ": " + e.what());
    }
    auto c = from_json(j);
    for (auto* p : {&c.paths.data_dir, &c.paths.run_dir}) *p = std::filesystem::absolute(*p).lexically_normal().string();
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path.string());
    f << to_json().dump(2) << '\n';
  }
};

}  // namespace xsurv
