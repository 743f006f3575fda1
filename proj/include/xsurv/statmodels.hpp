#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "xsurv/survival.hpp"

namespace xsurv {

// Rows = patients, columns = named features.
struct FeatureMatrix {
  std::vector<std::string> ids;
  std::vector<std::string> names;
  Eigen::MatrixXd values;

  int64_t rows() const { return values.rows(); }
  int64_t cols() const { return values.cols(); }

  int64_t column(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw Error("FeatureMatrix: no column " + name);
    return it - names.begin();
  }

  void validate() const {
    if (values.cols() != static_cast<int64_t>(names.size())) throw ShapeError("FeatureMatrix", 1, values.cols(), names.size());
    if (!ids.empty() && static_cast<int64_t>(ids.size()) != values.rows())
      throw ShapeError("FeatureMatrix", 0, ids.size(), values.rows());
    std::set<std::string> seen;
    for (const auto& n : names)
      if (!seen.insert(n).second) throw Error("FeatureMatrix: duplicate column " + n);
  }

  FeatureMatrix select(const std::vector<std::string>& keep) const {
    FeatureMatrix out{ids, keep, Eigen::MatrixXd(rows(), static_cast<int64_t>(keep.size()))};
    for (size_t j = 0; j < keep.size(); ++j) out.values.col(static_cast<int64_t>(j)) = values.col(column(keep[j]));
    return out;
  }

  FeatureMatrix take_rows(const std::vector<int64_t>& rows_idx) const {
    FeatureMatrix out{{}, names, Eigen::MatrixXd(static_cast<int64_t>(rows_idx.size()), cols())};
    for (size_t i = 0; i < rows_idx.size(); ++i) {
      out.values.row(static_cast<int64_t>(i)) = values.row(rows_idx[i]);
      if (!ids.empty()) out.ids.push_back(ids[static_cast<size_t>(rows_idx[i])]);
    }
    return out;
  }

  // Columns of a then b; ids from a.
  static FeatureMatrix hcat(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("FeatureMatrix::hcat", 0, b.rows(), a.rows());
    FeatureMatrix out{a.ids, a.names, Eigen::MatrixXd(a.rows(), a.cols() + b.cols())};
    out.names.insert(out.names.end(), b.names.begin(), b.names.end());
    out.values << a.values, b.values;
    out.validate();
    return out;
  }
};

// Tab-separated, header "id\t<names...>".
inline void write_feature_matrix(const std::string& path, const FeatureMatrix& m) {
  m.validate();
  std::ofstream f(path);
  if (!f) throw Error("write_feature_matrix: cannot open " + path);
  f << "id";
  for (const auto& n : m.names) f << '\t' << n;
  f << '\n';
  f.precision(17);
  for (int64_t i = 0; i < m.rows(); ++i) {
    f << (m.ids.empty() ? std::to_string(i) : m.ids[static_cast<size_t>(i)]);
    for (int64_t j = 0; j < m.cols(); ++j) f << '\t' << m.values(i, j);
    f << '\n';
  }
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream s(line);
  while (std::getline(s, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

inline FeatureMatrix read_feature_matrix(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_feature_matrix: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error("read_feature_matrix: empty file " + path);
  auto head = split_tabs(line);
  if (head.empty() || head[0] != "id") throw Error("read_feature_matrix: header must start with 'id'");
  FeatureMatrix m;
  m.names.assign(head.begin() + 1, head.end());
  std::vector<std::vector<double>> rows;
  for (int ln = 2; std::getline(f, line); ++ln) {
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    if (cells.size() != head.size())
      throw Error(path + ":" + std::to_string(ln) + ": expected " + std::to_string(head.size()) + " cells");
    m.ids.push_back(cells[0]);
    std::vector<double> r;
    for (size_t j = 1; j < cells.size(); ++j) {
      try {
        r.push_back(std::stod(cells[j]));
      } catch (const std::exception&) {
        throw Error(path + ":" + std::to_string(ln) + ": not a number: " + cells[j]);
      }
    }
    rows.push_back(std::move(r));
  }
  m.values.resize(static_cast<int64_t>(rows.size()), static_cast<int64_t>(m.names.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) m.values(static_cast<int64_t>(i), static_cast<int64_t>(j)) = rows[i][j];
  m.validate();
  return m;
}

struct Scaler {
  std::vector<std::string> names;  // kept columns
  Eigen::VectorXd mean, std;
  std::vector<std::string> dropped;  // zero variance on the fit rows

  FeatureMatrix apply(const FeatureMatrix& m) const {
    auto out = m.select(names);
    for (int64_t j = 0; j < out.cols(); ++j)
      out.values.col(j) = (out.values.col(j).array() - mean[j]) / std[j];
    return out;
  }
};

// Population mean/std from fit_rows (all rows when empty).
inline Scaler fit_zscore(const FeatureMatrix& m, const std::vector<int64_t>& fit_rows = {}) {
  std::vector<int64_t> rows = fit_rows;
  if (rows.empty())
    for (int64_t i = 0; i < m.rows(); ++i) rows.push_back(i);
  if (rows.size() < 2) throw Error("zscore: need at least 2 fit rows");
  Scaler s;
  std::vector<double> mu, sd;
  for (int64_t j = 0; j < m.cols(); ++j) {
    double a = 0.0, q = 0.0;
    for (int64_t i : rows) a += m.values(i, j);
    a /= static_cast<double>(rows.size());
    for (int64_t i : rows) q += (m.values(i, j) - a) * (m.values(i, j) - a);
    const double d = std::sqrt(q / static_cast<double>(rows.size()));
    if (!std::isfinite(d) || d <= 1e-12 * std::max(1.0, std::abs(a))) {
      s.dropped.push_back(m.names[static_cast<size_t>(j)]);
      continue;
    }
    s.names.push_back(m.names[static_cast<size_t>(j)]);
    mu.push_back(a);
    sd.push_back(d);
  }
  s.mean = Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<int64_t>(mu.size()));
  s.std = Eigen::Map<Eigen::VectorXd>(sd.data(), static_cast<int64_t>(sd.size()));
  return s;
}

inline std::pair<FeatureMatrix, Scaler> zscore(const FeatureMatrix& m, const std::vector<int64_t>& fit_rows = {}) {
  auto s = fit_zscore(m, fit_rows);
  return {s.apply(m), std::move(s)};
}

// Breslow partial likelihood for one design matrix, rows pre-sorted by
// descending time so risk sets are prefixes.
class CoxProblem {
 public:
  CoxProblem(const Eigen::MatrixXd& X, std::span<const SurvivalRecord> records) {
    if (X.rows() != static_cast<int64_t>(records.size())) throw ShapeError("cox", 0, X.rows(), records.size());
    const int64_t n = X.rows();
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return records[a].time_days > records[b].time_days; });
    X_.resize(n, X.cols());
    event_.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      X_.row(i) = X.row(order[static_cast<size_t>(i)]);
      event_[static_cast<size_t>(i)] = !records[order[static_cast<size_t>(i)]].censored;
      events_ += event_[static_cast<size_t>(i)];
    }
    for (int64_t g = 0; g < n;) {
      int64_t e = g;
      while (e < n && records[order[e]].time_days == records[order[g]].time_days) ++e;
      group_end_.push_back(e);
      g = e;
    }
  }

  int64_t n() const { return X_.rows(); }
  int64_t p() const { return X_.cols(); }
  int64_t events() const { return events_; }

  // Log partial likelihood; optional gradient and Hessian.
  double eval(const Eigen::VectorXd& beta, Eigen::VectorXd* grad = nullptr, Eigen::MatrixXd* hess = nullptr) const {
    const Eigen::VectorXd eta = X_ * beta;
    const double shift = eta.size() ? eta.maxCoeff() : 0.0;
    const int64_t p = X_.cols();
    double s0 = 0.0, ll = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2;
    if (grad) grad->setZero(p);
    if (hess) {
      hess->setZero(p, p);
      s2.setZero(p, p);
    }
    int64_t start = 0;
    for (int64_t end : group_end_) {
      int64_t d = 0;
      for (int64_t i = start; i < end; ++i) {
        const double w = std::exp(eta[i] - shift);
        s0 += w;
        if (grad || hess) s1.noalias() += w * X_.row(i).transpose();
        if (hess) s2.noalias() += w * X_.row(i).transpose() * X_.row(i);
        d += event_[static_cast<size_t>(i)];
      }
      if (d > 0) {
        const double dd = static_cast<double>(d);
        ll -= dd * (std::log(s0) + shift);
        for (int64_t i = start; i < end; ++i)
          if (event_[static_cast<size_t>(i)]) {
            ll += eta[i];
            if (grad) *grad += X_.row(i).transpose();
          }
        const Eigen::VectorXd m = s1 / s0;
        if (grad) *grad -= dd * m;
        if (hess) *hess -= dd * (s2 / s0 - m * m.transpose());
      }
      start = end;
    }
    return ll;
  }

 private:
  Eigen::MatrixXd X_;
  std::vector<char> event_;
  std::vector<int64_t> group_end_;
  int64_t events_ = 0;
};

struct CoxModel {
  std::vector<std::string> names;
  Eigen::VectorXd beta, se;
  double log_lik = 0.0;
  double grad_max = 0.0;
  int iterations = 0;
  bool converged = false;
  bool ridge = false;  // Hessian was singular; 1e-6 added on the diagonal

  double z(int64_t j) const { return beta[j] / se[j]; }
  // Two-sided Wald p-value.
  double p_value(int64_t j) const { return std::erfc(std::abs(z(j)) / std::sqrt(2.0)); }

  Eigen::VectorXd linear_predictor(const Eigen::MatrixXd& X) const { return X * beta; }
};

struct CoxOptions {
  double grad_tol = 1e-8;
  int max_iter = 100;
  double ridge = 1e-6;
};

// Newton-Raphson with step halving on the Breslow log partial likelihood.
inline CoxModel cox_fit(const FeatureMatrix& X, std::span<const SurvivalRecord> records, const CoxOptions& opt = {}) {
  X.validate();
  CoxProblem prob(X.values, records);
  if (prob.events() < 2) throw Error("cox_fit: need at least 2 uncensored events");
  const int64_t p = X.cols();
  CoxModel m;
  m.names = X.names;
  m.beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd g;
  Eigen::MatrixXd H;
  double ll = prob.eval(m.beta, &g, &H);
  const auto info_of = [&](const Eigen::MatrixXd& h) {
    Eigen::MatrixXd info = -h;
    if (m.ridge) info.diagonal().array() += opt.ridge;
    return info;
  };
  for (m.iterations = 0; m.iterations < opt.max_iter; ++m.iterations) {
    if (g.size() == 0 || g.cwiseAbs().maxCoeff() < opt.grad_tol) break;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info_of(H));
    const double dmax = ldlt.vectorD().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 1e-12 * std::max(1.0, dmax)) {
      if (!m.ridge) {
        m.ridge = true;
        ldlt.compute(info_of(H));
      }
    }
    const Eigen::VectorXd step = ldlt.solve(g);
    double t = 1.0, ll_new = ll;
    Eigen::VectorXd b_new;
    int halvings = 0;
    for (; halvings < 40; ++halvings, t *= 0.5) {
      b_new = m.beta + t * step;
      ll_new = prob.eval(b_new);
      if (std::isfinite(ll_new) && ll_new >= ll - 1e-12 * std::abs(ll)) break;
    }
    if (halvings == 40) break;
    m.beta = b_new;
    ll = prob.eval(m.beta, &g, &H);
  }
  m.log_lik = ll;
  m.grad_max = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
  m.converged = m.grad_max < opt.grad_tol;
  const Eigen::MatrixXd info = info_of(H);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  m.se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return m;
}

// Univariate Wald screen, then a multivariate refit of the survivors.
inline std::vector<std::string> cox_screen(const FeatureMatrix& clinical, std::span<const SurvivalRecord> records,
                                           double p_threshold = 0.05) {
  std::vector<std::string> uni;
  for (const auto& name : clinical.names) {
    const auto m = cox_fit(clinical.select({name}), records);
    if (m.se[0] > 0.0 && m.p_value(0) < p_threshold) uni.push_back(name);
  }
  if (uni.empty()) return {};
  const auto m = cox_fit(clinical.select(uni), records);
  std::vector<std::string> out;
  for (int64_t j = 0; j < static_cast<int64_t>(uni.size()); ++j)
    if (m.se[j] > 0.0 && m.p_value(j) < p_threshold) out.push_back(uni[static_cast<size_t>(j)]);
  return out;
}

struct LassoOptions {
  int folds = 5;
  uint64_t seed = 0;
  int max_iter = 100;  // outer Newton steps
  double tol = 1e-10;
};

// argmin -l(beta)/n + lambda |beta|_1 by proximal Newton: each outer step
// solves the quadratic model's lasso by coordinate descent, then backtracks.
inline Eigen::VectorXd lasso_cox(const CoxProblem& prob, double lambda, Eigen::VectorXd beta, const LassoOptions& opt = {}) {
  const double n = static_cast<double>(prob.n());
  const int64_t p = prob.p();
  if (beta.size() != p) beta = Eigen::VectorXd::Zero(p);
  const auto soft = [](double x, double t) { return std::copysign(std::max(std::abs(x) - t, 0.0), x); };
  const auto objective = [&](const Eigen::VectorXd& b) { return -prob.eval(b) / n + lambda * b.lpNorm<1>(); };
  Eigen::VectorXd g;
  Eigen::MatrixXd H;
  for (int it = 0; it < opt.max_iter; ++it) {
    const double F = -prob.eval(beta, &g, &H) / n + lambda * beta.lpNorm<1>();
    g /= -n;
    H /= -n;
    Eigen::VectorXd z = beta, Hd = Eigen::VectorXd::Zero(p);
    for (int sweep = 0; sweep < 1000; ++sweep) {
      double moved = 0.0;
      for (int64_t j = 0; j < p; ++j) {
        const double hjj = std::max(H(j, j), 1e-12);
        const double r = g[j] + Hd[j];
        const double zj = soft(z[j] - r / hjj, lambda / hjj);
        const double dz = zj - z[j];
        if (dz != 0.0) {
          Hd += dz * H.col(j);
          z[j] = zj;
          moved = std::max(moved, std::abs(dz));
        }
      }
      if (moved < 1e-13) break;
    }
    const Eigen::VectorXd d = z - beta;
    if (d.cwiseAbs().maxCoeff() < opt.tol) break;
    const double decrease = g.dot(d) + lambda * (z.lpNorm<1>() - beta.lpNorm<1>());
    double t = 1.0;
    Eigen::VectorXd next = z;
    for (int bt = 0; bt < 50 && objective(next) > F + 0.25 * t * decrease; ++bt) {
      t *= 0.5;
      next = beta + t * d;
    }
    beta = next;
    if (t * d.cwiseAbs().maxCoeff() < opt.tol) break;
  }
  return beta;
}

// Geometric grid from the smallest lambda that zeroes every coefficient.
inline std::vector<double> lasso_lambda_grid(const FeatureMatrix& X, std::span<const SurvivalRecord> records, int count = 20,
                                             double ratio = 0.02) {
  CoxProblem prob(X.values, records);
  Eigen::VectorXd g;
  prob.eval(Eigen::VectorXd::Zero(prob.p()), &g);
  const double lmax = g.cwiseAbs().maxCoeff() / static_cast<double>(prob.n());
  std::vector<double> grid;
  for (int i = 0; i < count; ++i) grid.push_back(lmax * std::pow(ratio, static_cast<double>(i) / (count - 1)));
  return grid;
}

struct LassoResult {
  std::vector<std::string> selected;
  double lambda = 0.0;
  Eigen::VectorXd beta;              // at the chosen lambda, full data
  std::vector<double> lambdas;       // sorted descending
  std::vector<double> cv_cindex;     // mean held-out C-index per lambda
  std::vector<Eigen::VectorXd> path; // full-data coefficients per lambda
  int path_violations = 0;           // a feature leaves the active set as lambda shrinks
};

inline LassoResult lasso_select(const FeatureMatrix& X, std::span<const SurvivalRecord> records, std::vector<double> lambda_grid,
                                const LassoOptions& opt = {}) {
  X.validate();
  if (lambda_grid.empty()) throw Error("lasso_select: empty lambda grid");
  if (opt.folds < 2) throw Error("lasso_select: need at least 2 folds");
  std::sort(lambda_grid.begin(), lambda_grid.end(), std::greater<>());
  const int64_t n = X.rows(), p = X.cols();
  LassoResult r;
  r.lambdas = lambda_grid;
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(opt.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> sum(lambda_grid.size(), 0.0);
  std::vector<int> used(lambda_grid.size(), 0);
  for (int k = 0; k < opt.folds; ++k) {
    std::vector<int64_t> tr, te;
    for (int64_t i = 0; i < n; ++i) (i % opt.folds == k ? te : tr).push_back(perm[static_cast<size_t>(i)]);
    const auto Xtr = X.take_rows(tr), Xte = X.take_rows(te);
    std::vector<SurvivalRecord> rtr, rte;
    for (auto i : tr) rtr.push_back(records[i]);
    for (auto i : te) rte.push_back(records[i]);
    CoxProblem prob(Xtr.values, rtr);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    for (size_t l = 0; l < lambda_grid.size(); ++l) {
      beta = lasso_cox(prob, lambda_grid[l], beta, opt);
      const Eigen::VectorXd lp = Xte.values * beta;
      std::vector<double> score(static_cast<size_t>(lp.size()));
      for (int64_t i = 0; i < lp.size(); ++i) score[static_cast<size_t>(i)] = -lp[i];
      const auto c = concordance_counts(score, rte);
      if (c.comparable == 0) continue;
      sum[l] += c.index();
      ++used[l];
    }
  }
  CoxProblem full(X.values, records);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  size_t best = 0;
  for (size_t l = 0; l < lambda_grid.size(); ++l) {
    r.cv_cindex.push_back(used[l] ? sum[l] / used[l] : 0.5);
    // ties keep the larger lambda
    if (r.cv_cindex[l] > r.cv_cindex[best] + 1e-12) best = l;
    beta = lasso_cox(full, lambda_grid[l], beta, opt);
    r.path.push_back(beta);
    if (l > 0)
      for (int64_t j = 0; j < p; ++j)
        if (r.path[l - 1][j] != 0.0 && beta[j] == 0.0) ++r.path_violations;
  }
  r.lambda = lambda_grid[best];
  r.beta = r.path[best];
  for (int64_t j = 0; j < p; ++j)
    if (r.beta[j] != 0.0) r.selected.push_back(X.names[static_cast<size_t>(j)]);
  return r;
}

struct EnhanceResult {
  CoxModel model;
  Scaler scaler;
  std::vector<double> scores;  // higher = longer predicted survival
};

// Cox on [score | radiomics | clinical], fit on fit_rows (all rows when
// empty) and applied to every row.
inline EnhanceResult enhance(std::span<const double> score_xsurv, const FeatureMatrix& radiomics, const FeatureMatrix& clinical,
                             std::span<const SurvivalRecord> records, const std::vector<int64_t>& fit_rows = {}) {
  const int64_t n = static_cast<int64_t>(score_xsurv.size());
  if (static_cast<int64_t>(records.size()) != n) throw ShapeError("enhance(records)", 0, records.size(), n);
  for (const auto* m : {&radiomics, &clinical})
    if (m->cols() > 0 && m->rows() != n) throw ShapeError("enhance(features)", 0, m->rows(), n);
  FeatureMatrix X{radiomics.ids, {"xsurv_score"}, Eigen::MatrixXd(n, 1)};
  for (int64_t i = 0; i < n; ++i) X.values(i, 0) = score_xsurv[static_cast<size_t>(i)];
  if (radiomics.cols() > 0) X = FeatureMatrix::hcat(X, radiomics);
  if (clinical.cols() > 0) X = FeatureMatrix::hcat(X, clinical);
  EnhanceResult r;
  r.scaler = fit_zscore(X, fit_rows);
  const auto Z = r.scaler.apply(X);
  std::vector<int64_t> rows = fit_rows;
  if (rows.empty())
    for (int64_t i = 0; i < n; ++i) rows.push_back(i);
  std::vector<SurvivalRecord> fit_rec;
  for (auto i : rows) fit_rec.push_back(records[i]);
  r.model = cox_fit(Z.take_rows(rows), fit_rec);
  const Eigen::VectorXd lp = r.model.linear_predictor(Z.values);
  r.scores.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) r.scores[static_cast<size_t>(i)] = -lp[i];
  return r;
}

}  // namespace xsurv
