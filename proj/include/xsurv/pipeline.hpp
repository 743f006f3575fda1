#pragma once

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "xsurv/parallel.hpp"
#include "xsurv/radiomics.hpp"
#include "xsurv/statmodels.hpp"
#include "xsurv/trainer.hpp"

namespace xsurv {

inline Dataset take(const Dataset& d, int64_t first, int64_t count) {
  Dataset out;
  for (int64_t i = first; i < first + count; ++i) {
    const auto k = static_cast<size_t>(i);
    out.ids.push_back(d.ids.at(k));
    out.samples.push_back(d.samples.at(k));
    out.records.push_back(d.records.at(k));
  }
  return out;
}

// Holds out the last ceil(fraction * n) patients; fraction 0 validates on the
// training patients.
inline std::pair<Dataset, Dataset> split_validation(const Dataset& d, double fraction) {
  const auto n = static_cast<int64_t>(d.size());
  if (fraction <= 0.0) return {d, d};
  const auto nv = static_cast<int64_t>(std::ceil(fraction * static_cast<double>(n)));
  if (nv < 1 || nv >= n) throw Error("validation split leaves no training or no validation patients");
  return {take(d, 0, n - nv), take(d, n - nv, nv)};
}

inline FeatureMatrix clinical_matrix(const std::vector<std::string>& ids, const std::vector<ClinicalRow>& rows) {
  FeatureMatrix m{ids, clinical_feature_names(), Eigen::MatrixXd(static_cast<int64_t>(rows.size()), 6)};
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto f = clinical_features(rows[i]);
    for (size_t j = 0; j < f.size(); ++j) m.values(static_cast<int64_t>(i), static_cast<int64_t>(j)) = f[j];
  }
  return m;
}

// Radiomics on the center crop the model sees, masked by the merged
// predicted PT and MLN segmentation. An empty prediction falls back to the
// whole crop with a warning.
template <typename T>
FeatureMatrix predicted_radiomics(const Prediction<T>& pred, const Dataset& data, int64_t crop, std::ostream* warn = &std::cerr) {
  const auto n = static_cast<int64_t>(data.size());
  FeatureMatrix m{data.ids, radiomics_names(), Eigen::MatrixXd(n, static_cast<int64_t>(radiomics_names().size()))};
  std::vector<char> fell_back(static_cast<size_t>(n), 0);
  parallel_for(n, [&](int64_t i) {
    const auto k = static_cast<size_t>(i);
    const auto s = center_crop(data.samples[k], crop);
    const auto binary = [](Volume v) {
      for (auto& x : v.data) x = x >= 0.5f ? 1.0f : 0.0f;
      return v;
    };
    Volume mask(s.pet.dims, Modality::kMask, 0.0f, s.pet.spacing);
    if (!pred.pt_prob.empty()) mask = merge_masks(mask, binary(pred.pt_prob[k]));
    if (!pred.mln_prob.empty()) mask = merge_masks(mask, binary(pred.mln_prob[k]));
    mask.spacing = s.pet.spacing;
    if (std::none_of(mask.data.begin(), mask.data.end(), [](float v) { return v > 0.5f; })) {
      std::fill(mask.data.begin(), mask.data.end(), 1.0f);
      fell_back[k] = 1;
    }
    const auto f = extract_features(s.pet, s.ct, mask);
    for (size_t j = 0; j < f.size(); ++j) m.values(i, static_cast<int64_t>(j)) = f[j];
  });
  if (warn)
    for (int64_t i = 0; i < n; ++i)
      if (fell_back[static_cast<size_t>(i)])
        *warn << "warning: " << data.ids[static_cast<size_t>(i)] << ": empty predicted mask, using the whole crop\n";
  return m;
}

struct EnhanceReport {
  double base_cindex = 0.0, enhanced_cindex = 0.0;  // on the evaluation rows
  std::vector<std::string> clinical, radiomics;     // selected columns
  std::vector<double> scores;                       // enhanced, every row
};

// Z-score, clinical Cox screen and radiomics LASSO on fit_rows, then the
// enhancement Cox model; C-indices on eval_rows.
inline EnhanceReport enhance_pipeline(const std::vector<double>& base_scores, const FeatureMatrix& radiomics,
                                      const FeatureMatrix& clinical, const std::vector<SurvivalRecord>& records,
                                      const std::vector<int64_t>& fit_rows, const std::vector<int64_t>& eval_rows,
                                      uint64_t seed = 0) {
  const auto pick = [](const auto& v, const std::vector<int64_t>& rows) {
    std::vector<std::decay_t<decltype(v[0])>> out;
    for (auto i : rows) out.push_back(v[static_cast<size_t>(i)]);
    return out;
  };
  const auto fit_rec = pick(records, fit_rows);
  EnhanceReport r;
  const auto zr = zscore(radiomics, fit_rows).first;
  const auto zc = zscore(clinical, fit_rows).first;
  r.clinical = cox_screen(zc.take_rows(fit_rows), fit_rec);
  const auto zr_fit = zr.take_rows(fit_rows);
  LassoOptions lo;
  lo.seed = seed;
  r.radiomics = lasso_select(zr_fit, fit_rec, lasso_lambda_grid(zr_fit, fit_rec), lo).selected;
  const auto e = enhance(base_scores, zr.select(r.radiomics), zc.select(r.clinical), records, fit_rows);
  r.scores = e.scores;
  const auto eval_rec = pick(records, eval_rows);
  r.base_cindex = concordance_index(pick(base_scores, eval_rows), eval_rec);
  r.enhanced_cindex = concordance_index(pick(r.scores, eval_rows), eval_rec);
  return r;
}

}  // namespace xsurv
