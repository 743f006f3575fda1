#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "xsurv/checkpoint.hpp"
#include "xsurv/data.hpp"
#include "xsurv/parallel.hpp"
#include "xsurv/segmentation.hpp"
#include "xsurv/survival.hpp"

namespace xsurv {

// Raised for non-finite losses; the CLI maps it to exit code 2.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

struct LrStage {
  int64_t iter = 0;  // on the 12000-iteration reference schedule
  double lr = 1e-4;
};

inline constexpr int64_t kReferenceIters = 12000;

struct TrainConfig {
  int64_t total_iters = 2000;
  int64_t batch_size = 2;
  std::vector<LrStage> lr_stages{{0, 1e-4}, {4000, 5e-5}, {8000, 1e-5}};
  int64_t validate_every = 200;
  double lambda = 1.0;
  double weight_decay = 1e-4;  // survival-head FC weights only
  int64_t crop = 32;           // training and validation input side
  bool augment = true;
  AugmentOptions augment_opts;
  uint64_t seed = 0;

  void validate() const {
    const auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw Error("TrainConfig: " + msg);
    };
    need(total_iters >= 1, "total_iters must be >= 1");
    need(batch_size >= 2 && batch_size % 2 == 0, "batch_size must be even and >= 2");
    need(validate_every >= 1 && total_iters % validate_every == 0, "validate_every must divide total_iters");
    need(!lr_stages.empty() && lr_stages[0].iter == 0, "lr_stages must start at iteration 0");
    for (size_t i = 1; i < lr_stages.size(); ++i) {
      need(lr_stages[i].iter > lr_stages[i - 1].iter, "lr stage boundaries must increase");
      need(lr_stages[i].lr <= lr_stages[i - 1].lr, "lr stages must be non-increasing");
    }
    for (const auto& s : lr_stages) need(s.lr > 0.0, "learning rates must be positive");
    need(lambda >= 0.0 && weight_decay >= 0.0, "lambda and weight_decay must be non-negative");
    need(crop >= 1, "crop must be positive");
  }

  Json to_json() const {
    Json st = Json::array();
    for (const auto& s : lr_stages) st.push_back(Json::array({s.iter, s.lr}));
    return Json{{"total_iters", total_iters},
                {"batch_size", batch_size},
                {"lr_stages", st},
                {"validate_every", validate_every},
                {"lambda", lambda},
                {"weight_decay", weight_decay},
                {"crop", crop},
                {"augment", augment},
                {"max_rotation_deg", augment_opts.max_rotation_deg},
                {"scale", augment_opts.scale},
                {"max_translation", augment_opts.max_translation},
                {"seed", seed}};
  }

  static TrainConfig from_json(const Json& j) {
    detail::reject_unknown_keys(j,
                                {"total_iters", "batch_size", "lr_stages", "validate_every", "lambda", "weight_decay",
                                 "crop", "augment", "max_rotation_deg", "scale", "max_translation", "seed"},
                                "train");
    TrainConfig c;
    detail::read_if(j, "total_iters", c.total_iters);
    detail::read_if(j, "batch_size", c.batch_size);
    if (j.contains("lr_stages")) {
      c.lr_stages.clear();
      for (const auto& s : j.at("lr_stages")) c.lr_stages.push_back({s.at(0).get<int64_t>(), s.at(1).get<double>()});
    }
    detail::read_if(j, "validate_every", c.validate_every);
    detail::read_if(j, "lambda", c.lambda);
    detail::read_if(j, "weight_decay", c.weight_decay);
    detail::read_if(j, "crop", c.crop);
    detail::read_if(j, "augment", c.augment);
    detail::read_if(j, "max_rotation_deg", c.augment_opts.max_rotation_deg);
    detail::read_if(j, "scale", c.augment_opts.scale);
    detail::read_if(j, "max_translation", c.augment_opts.max_translation);
    detail::read_if(j, "seed", c.seed);
    c.validate();
    return c;
  }
};

// Stage boundaries scale with total_iters / 12000.
inline double lr_at(int64_t iter, const TrainConfig& cfg) {
  if (iter < 0 || iter >= cfg.total_iters) throw Error("lr_at: iteration out of range");
  double lr = cfg.lr_stages.front().lr;
  for (const auto& s : cfg.lr_stages) {
    const int64_t boundary = s.iter * cfg.total_iters / kReferenceIters;
    if (iter >= boundary) lr = s.lr;
  }
  return lr;
}

// Endless stream of index batches, half censored and half uncensored. Each
// stratum is walked in a fresh shuffle per pass; the smaller one wraps
// around (sampling with replacement across passes).
class BalancedBatches {
 public:
  BalancedBatches(std::span<const SurvivalRecord> records, int64_t batch_size, uint64_t seed) : half_(batch_size / 2), rng_(seed) {
    if (batch_size < 2 || batch_size % 2 != 0) throw Error("balanced_batches: batch_size must be even and >= 2");
    for (size_t i = 0; i < records.size(); ++i) (records[i].censored ? strata_[0] : strata_[1]).pool.push_back(i);
    if (strata_[0].pool.empty() || strata_[1].pool.empty())
      throw Error("balanced_batches: need both censored and uncensored records");
  }

  std::vector<size_t> next() {
    std::vector<size_t> b;
    for (auto& s : strata_)
      for (int64_t k = 0; k < half_; ++k) {
        if (s.pos == s.order.size()) {
          s.order = s.pool;
          std::shuffle(s.order.begin(), s.order.end(), rng_);
          s.pos = 0;
        }
        b.push_back(s.order[s.pos++]);
      }
    std::shuffle(b.begin(), b.end(), rng_);
    return b;
  }

 private:
  struct Stratum {
    std::vector<size_t> pool, order;
    size_t pos = 0;
  };
  int64_t half_;
  std::mt19937_64 rng_;
  std::array<Stratum, 2> strata_;  // censored, uncensored
};

struct Dataset {
  std::vector<std::string> ids;
  std::vector<Sample> samples;
  std::vector<SurvivalRecord> records;

  size_t size() const { return samples.size(); }
  void validate() const {
    if (samples.empty()) throw Error("Dataset: empty");
    if (ids.size() != samples.size() || records.size() != samples.size()) throw Error("Dataset: ids, samples and records differ in length");
  }
};

inline Dataset load_dataset(const std::vector<ManifestRow>& rows, const std::string& split, const std::filesystem::path& base,
                            const PreprocessOptions& opt) {
  std::vector<const ManifestRow*> picked;
  for (const auto& r : rows)
    if (split.empty() || r.split == split) picked.push_back(&r);
  Dataset d;
  d.samples.resize(picked.size());
  for (const auto* r : picked) {
    d.ids.push_back(r->id);
    d.records.push_back(r->record);
  }
  parallel_for(static_cast<int64_t>(picked.size()),
               [&](int64_t i) { d.samples[static_cast<size_t>(i)] = load_sample(*picked[static_cast<size_t>(i)], base, opt); });
  return d;
}

// Phantoms rendered in memory and preprocessed around the PT center.
inline Dataset phantom_dataset(const PhantomSpec& spec, uint64_t first, uint64_t count, const PreprocessOptions& opt,
                               const PhantomCalibration& cal) {
  Dataset d;
  d.ids.resize(count);
  d.samples.resize(count);
  d.records.resize(count);
  parallel_for(static_cast<int64_t>(count), [&](int64_t k) {
    const auto i = static_cast<size_t>(k);
    const auto p = generate_phantom(spec, first + i, cal);
    const Vec3 c = p.draw.pt.center;
    auto [pet, ct] = preprocess(p.pet, p.ct, c, opt);
    d.ids[i] = "P" + std::to_string(first + i);
    d.samples[i] = {std::move(pet), std::move(ct), preprocess_mask(p.pt_mask, c, opt), preprocess_mask(p.mln_mask, c, opt)};
    d.records[i] = p.draw.record;
  });
  return d;
}

namespace detail {

template <typename T>
Tensor<T> stack_volumes(const std::vector<const Volume*>& vs) {
  const auto& d = vs.front()->dims;
  Buffer<T> data;
  data.reserve(vs.size() * static_cast<size_t>(vs.front()->size()));
  for (const auto* v : vs) {
    if (v->dims != d) throw Error("stack_volumes: dims differ");
    data.insert(data.end(), v->data.begin(), v->data.end());
  }
  return Tensor<T>::from({static_cast<int64_t>(vs.size()), 1, d[0], d[1], d[2]}, std::move(data));
}

template <typename T>
Tensor<T> stack_field(const std::vector<Sample>& batch, Volume Sample::*field) {
  std::vector<const Volume*> vs;
  for (const auto& s : batch) vs.push_back(&(s.*field));
  return stack_volumes<T>(vs);
}

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace detail

template <typename T>
struct Prediction {
  std::vector<double> scores;                 // expected RFS, higher = longer survival
  std::vector<std::vector<double>> s_pred;    // [patient][interval]
  std::vector<Volume> pt_prob, mln_prob;      // empty when the branch is absent
  std::vector<std::vector<Volume>> attention;  // [patient][scale * 3 + {pt, mln, bg}]
};

// Inference on center crops, one patient at a time.
template <typename T>
Prediction<T> predict(const XSurvModel<T>& model, const Dataset& data, const IntervalScheme& scheme, int64_t crop,
                      bool keep_attention = false) {
  NoGradGuard ng;
  Prediction<T> out;
  const auto to_volume = [](const Tensor<T>& t, int64_t i, const Volume& like) {
    Volume v(like.dims, Modality::kMask, 0.0f, like.spacing);
    const auto n = static_cast<int64_t>(v.data.size());
    if (t.numel() / t.dim(0) != n) throw Error("predict: output grid does not match the input crop");
    for (int64_t k = 0; k < n; ++k) v.data[static_cast<size_t>(k)] = static_cast<float>(t.at(i * n + k));
    return v;
  };
  for (size_t i = 0; i < data.size(); ++i) {
    const std::vector<Sample> one{center_crop(data.samples[i], crop)};
    const auto f = model.forward(detail::stack_field<T>(one, &Sample::pet), detail::stack_field<T>(one, &Sample::ct), false, nullptr);
    const auto rfs = predict_rfs_batch(f.s_pred, scheme);
    out.scores.push_back(rfs[0]);
    std::vector<double> sp;
    for (int64_t k = 0; k < f.s_pred.dim(1); ++k) sp.push_back(static_cast<double>(f.s_pred.at(k)));
    out.s_pred.push_back(sp);
    if (f.pt_prob) out.pt_prob.push_back(to_volume(f.pt_prob, 0, one[0].pet));
    if (f.mln_prob) out.mln_prob.push_back(to_volume(f.mln_prob, 0, one[0].pet));
    if (keep_attention) {
      std::vector<Volume> maps;
      for (const auto& a : f.attention_maps)
        for (const auto* t : {&a.alpha_pt, &a.alpha_mln, &a.alpha_bg})
          if (*t) {
            Volume v({t->dim(2), t->dim(3), t->dim(4)}, Modality::kMask);
            for (size_t k = 0; k < v.data.size(); ++k) v.data[k] = static_cast<float>(t->at(static_cast<int64_t>(k)));
            maps.push_back(std::move(v));
          }
      out.attention.push_back(std::move(maps));
    }
  }
  return out;
}

struct EvalMetrics {
  double cindex = std::numeric_limits<double>::quiet_NaN();
  double dsc_pt = std::numeric_limits<double>::quiet_NaN();  // mean over patients; NaN without the branch
  double dsc_mln = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
EvalMetrics evaluate(const Prediction<T>& p, const Dataset& data, int64_t crop) {
  EvalMetrics m;
  m.cindex = concordance_index(p.scores, data.records);
  const auto mean_dsc = [&](const std::vector<Volume>& probs, Volume Sample::*gt) {
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      const auto g = center_crop(data.samples[i], crop).*gt;
      const auto b = binarize(std::span<const float>(probs[i].data));
      acc += dsc_metric(std::span<const float>(b), std::span<const float>(g.data));
    }
    return acc / static_cast<double>(probs.size());
  };
  if (!p.pt_prob.empty()) m.dsc_pt = mean_dsc(p.pt_prob, &Sample::pt_mask);
  if (!p.mln_prob.empty()) m.dsc_mln = mean_dsc(p.mln_prob, &Sample::mln_mask);
  return m;
}

struct LogRow {
  int64_t iter = 0;  // iterations completed
  double train_loss = 0.0;  // mean since the previous row
  EvalMetrics val;
};

inline std::string format_log_row(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\t%.9g\t%.9g", static_cast<long long>(r.iter), r.train_loss, r.val.cindex,
                r.val.dsc_pt, r.val.dsc_mln);
  return buf;
}

inline const char* kLogHeader = "iter\ttrain_loss\tval_cindex\tval_dsc_pt\tval_dsc_mln";

struct TrainResult {
  std::vector<LogRow> log;
  int64_t best_iter = -1;
  double best_cindex = -1.0;
  IntervalScheme scheme;
  std::filesystem::path best_checkpoint, log_path;
};

// Called after each validation row; returning true ends training early.
using StopRule = std::function<bool(const LogRow&)>;

// Trains in place. Writes metrics.tsv, best.ckpt and last.ckpt into out_dir;
// the model ends holding the last iterate.
template <typename T>
TrainResult train(XSurvModel<T>& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, std::ostream* progress = nullptr, const StopRule& stop = {}) {
  cfg.validate();
  train_set.validate();
  val_set.validate();
  std::filesystem::create_directories(out_dir);
  TrainResult res;
  {
    std::vector<double> times;
    for (const auto& r : train_set.records) times.push_back(r.time_days);
    res.scheme = build_intervals(times, model.config().N_intervals);
  }
  std::vector<SurvivalLabels> labels;
  for (const auto& r : train_set.records) labels.push_back(make_labels(r, res.scheme));

  res.log_path = out_dir / "metrics.tsv";
  res.best_checkpoint = out_dir / "best.ckpt";
  std::ofstream log(res.log_path);
  if (!log) throw Error("train: cannot write " + res.log_path.string());
  log << kLogHeader << "\n";

  const auto meta = [&](int64_t iter, const EvalMetrics& m) {
    return Json{{"iter", iter}, {"val_cindex", m.cindex}, {"edges", res.scheme.edges}, {"train", cfg.to_json()}};
  };

  BalancedBatches batches(train_set.records, cfg.batch_size, cfg.seed);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<T> adam(model.params());
  double loss_acc = 0.0;
  int64_t loss_n = 0;
  for (int64_t it = 0; it < cfg.total_iters; ++it) {
    const auto idx = batches.next();
    std::vector<Sample> batch;
    std::vector<SurvivalLabels> bl;
    for (size_t i : idx) {
      const auto& s = train_set.samples[i];
      batch.push_back(cfg.augment ? augment(s, sample_augment(s.pet.dims, cfg.crop, rng, cfg.augment_opts)) : center_crop(s, cfg.crop));
      bl.push_back(labels[i]);
    }
    model.params().zero_grad();
    const auto f = model.forward(detail::stack_field<T>(batch, &Sample::pet), detail::stack_field<T>(batch, &Sample::ct), true, &rng);
    const auto fail = [&] {
      save_checkpoint((out_dir / "last_good.ckpt").string(), model, meta(it, {}));
      return NumericalFailure("train: non-finite loss at iteration " + std::to_string(it) +
                              "; parameters before this step saved to last_good.ckpt");
    };
    for (T v : f.s_pred.values())
      if (!detail::finite(static_cast<double>(v))) throw fail();
    const auto ls = survival_loss(f.s_pred, bl);
    Tensor<T> lp, lm;
    if (f.pt_prob) lp = segmentation_loss(f.pt_prob, detail::stack_field<T>(batch, &Sample::pt_mask));
    if (f.mln_prob) lm = segmentation_loss(f.mln_prob, detail::stack_field<T>(batch, &Sample::mln_mask));
    for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&ls, &lp, &lm})
      if (*t && !detail::finite(static_cast<double>(t->item()))) throw fail();
    const auto loss = combined_loss(ls, lp, lm, cfg.lambda);
    backward(loss);
    adam.step(lr_at(it, cfg), cfg.weight_decay);
    loss_acc += static_cast<double>(loss.item());
    ++loss_n;

    if ((it + 1) % cfg.validate_every == 0) {
      const auto pred = predict(model, val_set, res.scheme, cfg.crop);
      LogRow row{it + 1, loss_acc / static_cast<double>(loss_n), evaluate(pred, val_set, cfg.crop)};
      loss_acc = 0.0;
      loss_n = 0;
      res.log.push_back(row);
      log << format_log_row(row) << "\n" << std::flush;
      if (progress) *progress << format_log_row(row) << "\n" << std::flush;
      // strict: ties keep the earlier checkpoint
      if (row.val.cindex > res.best_cindex) {
        res.best_cindex = row.val.cindex;
        res.best_iter = row.iter;
        save_checkpoint(res.best_checkpoint.string(), model, meta(row.iter, row.val));
      }
      if (stop && stop(row)) break;
    }
  }
  const int64_t done = res.log.empty() ? 0 : res.log.back().iter;
  save_checkpoint((out_dir / "last.ckpt").string(), model, meta(done, res.log.empty() ? EvalMetrics{} : res.log.back().val));
  return res;
}

inline std::vector<LogRow> read_metric_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_metric_log: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kLogHeader) throw Error("read_metric_log: unexpected header in " + path.string());
  std::vector<LogRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    LogRow r;
    std::string f[5];
    for (auto& x : f)
      if (!std::getline(ss, x, '\t')) throw Error("read_metric_log: short row");
    r.iter = std::stoll(f[0]);
    r.train_loss = std::stod(f[1]);
    r.val.cindex = std::stod(f[2]);
    r.val.dsc_pt = std::stod(f[3]);
    r.val.dsc_mln = std::stod(f[4]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace xsurv
