#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "xsurv/ops.hpp"

namespace xsurv {

struct SurvivalRecord {
  double time_days = 0.0;
  bool censored = false;  // true: event not observed
};

// N intervals with edges[0] = 0 < edges[1] < ... < edges[N].
struct IntervalScheme {
  std::vector<double> edges;

  int n() const { return static_cast<int>(edges.size()) - 1; }
  double duration(int k) const { return edges[static_cast<size_t>(k) + 1] - edges[static_cast<size_t>(k)]; }
  std::vector<double> durations() const {
    std::vector<double> t(static_cast<size_t>(n()));
    for (int k = 0; k < n(); ++k) t[static_cast<size_t>(k)] = duration(k);
    return t;
  }
  double horizon() const { return edges.back(); }

  // 0-based interval holding t, edges right-inclusive; times past the last
  // edge land in the last interval.
  int interval_of(double t) const {
    const auto it = std::lower_bound(edges.begin() + 1, edges.end(), t);
    if (it == edges.end()) return n() - 1;
    return static_cast<int>(it - edges.begin()) - 1;
  }

  void validate() const {
    if (edges.size() < 3) throw Error("IntervalScheme: need at least 2 intervals");
    if (edges[0] != 0.0) throw Error("IntervalScheme: first edge must be 0");
    for (size_t i = 1; i < edges.size(); ++i)
      if (!(edges[i] > edges[i - 1])) throw Error("IntervalScheme: edges must be strictly increasing");
  }
};

// Equal-count edges: edge k is the (k/n)-quantile of the sorted times
// (sorted[floor(k*m/n) - 1]), edge 0 is 0, edge n is the maximum.
inline IntervalScheme build_intervals(std::vector<double> times, int n) {
  if (n < 2) throw Error("build_intervals: n must be >= 2");
  for (double t : times)
    if (!(t > 0.0) || !std::isfinite(t)) throw Error("build_intervals: times must be positive and finite");
  std::sort(times.begin(), times.end());
  std::vector<double> uniq = times;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (static_cast<int>(uniq.size()) < n)
    throw Error("build_intervals: only " + std::to_string(uniq.size()) + " distinct times for " + std::to_string(n) +
                " intervals; use a smaller number of intervals");
  const size_t m = times.size();
  IntervalScheme s;
  s.edges.resize(static_cast<size_t>(n) + 1);
  s.edges[0] = 0.0;
  for (int k = 1; k <= n; ++k) {
    const size_t idx = static_cast<size_t>(k) * m / static_cast<size_t>(n);
    s.edges[static_cast<size_t>(k)] = times[idx - 1];
  }
  for (size_t k = 1; k < s.edges.size(); ++k)
    if (s.edges[k] <= s.edges[k - 1]) s.edges[k] = std::nextafter(s.edges[k - 1], HUGE_VAL);
  return s;
}

struct SurvivalLabels {
  std::vector<double> S;      // 1 for intervals survived
  std::vector<double> S_bar;  // 1 at the event interval (uncensored only)
};

inline SurvivalLabels make_labels(const SurvivalRecord& rec, const IntervalScheme& scheme) {
  if (!(rec.time_days > 0.0)) throw Error("make_labels: time must be positive");
  const int n = scheme.n();
  SurvivalLabels l{std::vector<double>(static_cast<size_t>(n), 0.0), std::vector<double>(static_cast<size_t>(n), 0.0)};
  if (rec.censored && rec.time_days > scheme.horizon()) {
    std::fill(l.S.begin(), l.S.end(), 1.0);
    return l;
  }
  const int k = scheme.interval_of(rec.time_days);
  for (int j = 0; j < k; ++j) l.S[static_cast<size_t>(j)] = 1.0;
  if (!rec.censored) l.S_bar[static_cast<size_t>(k)] = 1.0;
  return l;
}

// Negative log-likelihood of discrete-time survival, averaged over the batch.
// s_pred: [B, N] conditional survival probabilities.
template <typename T>
Tensor<T> survival_loss(const Tensor<T>& s_pred, const std::vector<SurvivalLabels>& labels, double eps = 1e-7) {
  if (s_pred.ndim() != 2) throw ShapeError("survival_loss", 0, s_pred.ndim(), 2);
  const int64_t b = s_pred.dim(0), n = s_pred.dim(1);
  if (static_cast<int64_t>(labels.size()) != b) throw ShapeError("survival_loss", 0, b, labels.size());
  std::vector<T> S, Sb;
  for (const auto& l : labels) {
    if (static_cast<int64_t>(l.S.size()) != n || static_cast<int64_t>(l.S_bar.size()) != n)
      throw ShapeError("survival_loss", 1, n, l.S.size());
    S.insert(S.end(), l.S.begin(), l.S.end());
    Sb.insert(Sb.end(), l.S_bar.begin(), l.S_bar.end());
  }
  for (T v : s_pred.values())
    if (!(v >= T(0) && v <= T(1))) throw Error("survival_loss: predictions must lie in [0, 1]");
  const auto St = Tensor<T>::from({b, n}, std::move(S)), Sbt = Tensor<T>::from({b, n}, std::move(Sb));
  const T e = static_cast<T>(eps);
  // 1 + S (p - 1) and 1 - S_bar p
  auto survived = clamp_min(add_scalar(mul(St, add_scalar(s_pred, T(-1))), T(1)), e);
  auto event = clamp_min(one_minus(mul(Sbt, s_pred)), e);
  return scale(sum(add(log(survived), log(event))), T(-1) / static_cast<T>(b));
}

// Expected RFS: sum_k (prod_{i<=k} p_i) * T_k.
inline double predict_rfs(std::span<const double> s_pred, const IntervalScheme& scheme) {
  if (static_cast<int>(s_pred.size()) != scheme.n()) throw ShapeError("predict_rfs", 0, s_pred.size(), scheme.n());
  double prod = 1.0, rfs = 0.0;
  for (int k = 0; k < scheme.n(); ++k) {
    prod *= s_pred[static_cast<size_t>(k)];
    rfs += prod * scheme.duration(k);
  }
  return rfs;
}

template <typename T>
std::vector<double> predict_rfs_batch(const Tensor<T>& s_pred, const IntervalScheme& scheme) {
  const int64_t b = s_pred.dim(0), n = s_pred.dim(1);
  std::vector<double> out(static_cast<size_t>(b));
  std::vector<double> row(static_cast<size_t>(n));
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t k = 0; k < n; ++k) row[static_cast<size_t>(k)] = static_cast<double>(s_pred.at(i * n + k));
    out[static_cast<size_t>(i)] = predict_rfs(row, scheme);
  }
  return out;
}

struct ConcordanceCounts {
  int64_t comparable = 0;
  int64_t concordant = 0;
  int64_t tied = 0;
  double index() const { return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) / comparable; }
};

// Harrell's pair counts in O(n log n). A pair is comparable when the shorter
// observed time is an event and the times differ; it is concordant when that
// record also has the lower score (scores: higher = longer survival).
inline ConcordanceCounts concordance_counts(std::span<const double> scores,
                                            std::span<const SurvivalRecord> records) {
  if (scores.size() != records.size()) throw ShapeError("concordance_index", 0, scores.size(), records.size());
  const size_t n = records.size();
  std::vector<double> ranks(scores.begin(), scores.end());
  std::sort(ranks.begin(), ranks.end());
  ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());
  const auto rank_of = [&](double s) { return static_cast<size_t>(std::lower_bound(ranks.begin(), ranks.end(), s) - ranks.begin()); };
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return records[a].time_days > records[b].time_days; });
  // Fenwick tree over score ranks of records with strictly larger time.
  std::vector<int64_t> tree(ranks.size() + 1, 0);
  const auto add_at = [&](size_t r) {
    for (size_t i = r + 1; i < tree.size(); i += i & (~i + 1)) ++tree[i];
  };
  const auto prefix = [&](size_t r) {  // count of ranks < r
    int64_t c = 0;
    for (size_t i = r; i > 0; i -= i & (~i + 1)) c += tree[i];
    return c;
  };
  ConcordanceCounts out;
  int64_t inserted = 0;
  for (size_t g = 0; g < n;) {
    size_t e = g;
    while (e < n && records[order[e]].time_days == records[order[g]].time_days) ++e;
    for (size_t i = g; i < e; ++i) {
      const auto& r = records[order[i]];
      if (r.censored) continue;
      const size_t rk = rank_of(scores[order[i]]);
      const int64_t below = prefix(rk), upto = prefix(rk + 1);
      out.comparable += inserted;
      out.tied += upto - below;
      out.concordant += inserted - upto;
    }
    for (size_t i = g; i < e; ++i) add_at(rank_of(scores[order[i]]));
    inserted += static_cast<int64_t>(e - g);
    g = e;
  }
  return out;
}

inline double concordance_index(std::span<const double> scores, std::span<const SurvivalRecord> records) {
  const auto c = concordance_counts(scores, records);
  if (c.comparable == 0) throw Error("concordance_index: no comparable pairs");
  return c.index();
}

}  // namespace xsurv
