#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "xsurv/data.hpp"
#include "xsurv/statmodels.hpp"

namespace xsurv {

inline constexpr int kGlcmLevels = 32;

// Band order: bit 2 = z, bit 1 = y, bit 0 = x; set bit means high-pass.
inline std::string haar_band_name(int band) {
  std::string s = "LLL";
  for (int a = 0; a < 3; ++a)
    if (band & (4 >> a)) s[static_cast<size_t>(a)] = 'H';
  return s;
}

namespace detail {

// Index into a padded axis of length n + (n odd): the extra sample reflects
// about the last one (x[n-2]), or repeats it when n == 1.
inline int64_t reflect_index(int64_t i, int64_t n) { return i < n ? i : (n >= 2 ? n - 2 : 0); }

inline int64_t even_up(int64_t n) { return n + (n & 1); }

}  // namespace detail

// Single-level separable 3D Haar with 1/sqrt(2) per axis. Odd dims are
// reflect-padded by one sample. Each band has dims ceil(d/2).
inline std::array<Volume, 8> haar3d(const Volume& v) {
  v.validate();
  const Dims3 p{detail::even_up(v.dims[0]), detail::even_up(v.dims[1]), detail::even_up(v.dims[2])};
  const Dims3 h{p[0] / 2, p[1] / 2, p[2] / 2};
  const Vec3 sp{v.spacing[0] * 2, v.spacing[1] * 2, v.spacing[2] * 2};
  std::array<Volume, 8> out;
  for (auto& b : out) b = Volume(h, v.modality, 0.0f, sp);
  const double s = 1.0 / std::sqrt(8.0);
  for (int64_t z = 0; z < h[0]; ++z)
    for (int64_t y = 0; y < h[1]; ++y)
      for (int64_t x = 0; x < h[2]; ++x) {
        double c[2][2][2];
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              c[dz][dy][dx] = v.at(detail::reflect_index(2 * z + dz, v.dims[0]), detail::reflect_index(2 * y + dy, v.dims[1]),
                                   detail::reflect_index(2 * x + dx, v.dims[2]));
        for (int band = 0; band < 8; ++band) {
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const bool neg = ((band & 4) && dz) ^ ((band & 2) && dy) ^ ((band & 1) && dx);
                acc += neg ? -c[dz][dy][dx] : c[dz][dy][dx];
              }
          out[static_cast<size_t>(band)].at(z, y, x) = static_cast<float>(s * acc);
        }
      }
  return out;
}

// Inverse of haar3d. Returns the padded grid cropped to dims.
inline Volume inverse_haar3d(const std::array<Volume, 8>& bands, Dims3 dims) {
  const auto& h = bands[0].dims;
  for (const auto& b : bands)
    if (b.dims != h) throw Error("inverse_haar3d: sub-band dims differ");
  for (int a = 0; a < 3; ++a)
    if (detail::even_up(dims[static_cast<size_t>(a)]) != 2 * h[static_cast<size_t>(a)])
      throw Error("inverse_haar3d: target dims do not match sub-band dims");
  const Vec3 sp{bands[0].spacing[0] / 2, bands[0].spacing[1] / 2, bands[0].spacing[2] / 2};
  Volume v(dims, bands[0].modality, 0.0f, sp);
  const double s = 1.0 / std::sqrt(8.0);
  for (int64_t z = 0; z < h[0]; ++z)
    for (int64_t y = 0; y < h[1]; ++y)
      for (int64_t x = 0; x < h[2]; ++x)
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int64_t zz = 2 * z + dz, yy = 2 * y + dy, xx = 2 * x + dx;
              if (zz >= dims[0] || yy >= dims[1] || xx >= dims[2]) continue;
              double acc = 0.0;
              for (int band = 0; band < 8; ++band) {
                const bool neg = ((band & 4) && dz) ^ ((band & 2) && dy) ^ ((band & 1) && dx);
                const double b = bands[static_cast<size_t>(band)].at(z, y, x);
                acc += neg ? -b : b;
              }
              v.at(zz, yy, xx) = static_cast<float>(s * acc);
            }
  return v;
}

// Mask on the sub-band grid: a cell is set when any of its 2x2x2 voxels is.
inline Volume downsample_mask_any(const Volume& m) {
  const Dims3 h{detail::even_up(m.dims[0]) / 2, detail::even_up(m.dims[1]) / 2, detail::even_up(m.dims[2]) / 2};
  Volume out(h, Modality::kMask, 0.0f, {m.spacing[0] * 2, m.spacing[1] * 2, m.spacing[2] * 2});
  for (int64_t z = 0; z < m.dims[0]; ++z)
    for (int64_t y = 0; y < m.dims[1]; ++y)
      for (int64_t x = 0; x < m.dims[2]; ++x)
        if (m.at(z, y, x) > 0.5f) out.at(z / 2, y / 2, x / 2) = 1.0f;
  return out;
}

namespace detail {

inline std::vector<double> masked_values(const Volume& v, const Volume& m) {
  std::vector<double> xs;
  for (size_t i = 0; i < v.data.size(); ++i)
    if (m.data[i] > 0.5f) xs.push_back(v.data[i]);
  return xs;
}

// Linear interpolation between order statistics; xs sorted.
inline double percentile(const std::vector<double>& xs, double q) {
  const double pos = q / 100.0 * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

// Gray levels 1..levels by min-max binning; all 1 when the range is empty.
inline int quantize(double x, double lo, double hi, int levels) {
  if (!(hi > lo)) return 1;
  const int q = static_cast<int>(std::floor((x - lo) / (hi - lo) * levels));
  return std::clamp(q, 0, levels - 1) + 1;
}

}  // namespace detail

inline const std::vector<std::string>& first_order_names() {
  static const std::vector<std::string> n{"mean", "median", "min", "max", "variance", "skewness",
                                          "kurtosis", "energy", "entropy", "p10", "p90"};
  return n;
}

inline std::vector<double> first_order(std::vector<double> xs) {
  if (xs.empty()) throw Error("first_order: no voxels");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double mean = 0.0, energy = 0.0;
  for (double x : xs) {
    mean += x;
    energy += x * x;
  }
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  // flat distributions: skewness 0, kurtosis 0 (no defined value)
  const bool flat = m2 <= 1e-24 * std::max(1.0, mean * mean);
  std::array<double, kGlcmLevels> hist{};
  for (double x : xs) hist[static_cast<size_t>(detail::quantize(x, xs.front(), xs.back(), kGlcmLevels) - 1)] += 1.0;
  double entropy = 0.0;
  for (double c : hist)
    if (c > 0) entropy -= c / n * std::log2(c / n);
  return {mean,
          detail::percentile(xs, 50),
          xs.front(),
          xs.back(),
          flat ? 0.0 : m2,
          flat ? 0.0 : m3 / std::pow(m2, 1.5),
          flat ? 0.0 : m4 / (m2 * m2),
          energy,
          entropy,
          detail::percentile(xs, 10),
          detail::percentile(xs, 90)};
}

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> n{"volume_mm3", "surface_mm2", "sphericity", "max_diameter_mm"};
  return n;
}

inline std::vector<double> shape_features(const Volume& m) {
  const auto in = [&](int64_t z, int64_t y, int64_t x) { return m.inside(z, y, x) && m.at(z, y, x) > 0.5f; };
  const double face[3] = {m.spacing[1] * m.spacing[2], m.spacing[0] * m.spacing[2], m.spacing[0] * m.spacing[1]};
  int64_t n = 0;
  double area = 0.0;
  std::vector<Vec3> boundary;
  for (int64_t z = 0; z < m.dims[0]; ++z)
    for (int64_t y = 0; y < m.dims[1]; ++y)
      for (int64_t x = 0; x < m.dims[2]; ++x) {
        if (!in(z, y, x)) continue;
        ++n;
        int exposed = 0;
        const int64_t nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x}, {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
        for (int k = 0; k < 6; ++k)
          if (!in(nb[k][0], nb[k][1], nb[k][2])) {
            area += face[k / 2];
            ++exposed;
          }
        if (exposed) boundary.push_back({z * m.spacing[0], y * m.spacing[1], x * m.spacing[2]});
      }
  if (n == 0) throw Error("shape_features: empty mask");
  const double vol = static_cast<double>(n) * m.spacing[0] * m.spacing[1] * m.spacing[2];
  double d2 = 0.0;
  for (size_t i = 0; i < boundary.size(); ++i)
    for (size_t j = i + 1; j < boundary.size(); ++j) {
      double s = 0.0;
      for (int a = 0; a < 3; ++a) s += std::pow(boundary[i][a] - boundary[j][a], 2);
      d2 = std::max(d2, s);
    }
  const double sphericity = std::cbrt(36.0 * std::numbers::pi * vol * vol) / area;
  return {vol, area, sphericity, std::sqrt(d2)};
}

inline const std::vector<std::string>& glcm_names() {
  static const std::vector<std::string> n{"contrast", "correlation", "energy", "homogeneity", "entropy"};
  return n;
}

// The 13 unique offsets at distance 1 (the other 13 are their negatives).
inline const std::array<std::array<int, 3>, 13>& glcm_offsets() {
  static const std::array<std::array<int, 3>, 13> o{{{0, 0, 1},
                                                     {0, 1, 0},
                                                     {0, 1, 1},
                                                     {0, 1, -1},
                                                     {1, 0, 0},
                                                     {1, 0, 1},
                                                     {1, 0, -1},
                                                     {1, 1, 0},
                                                     {1, -1, 0},
                                                     {1, 1, 1},
                                                     {1, 1, -1},
                                                     {1, -1, 1},
                                                     {1, -1, -1}}};
  return o;
}

// Normalized symmetric co-occurrence matrix for one offset, levels x levels,
// over pairs with both voxels in the mask. Empty when no pair exists.
inline Eigen::MatrixXd glcm_matrix(const std::vector<int>& q, const Volume& m, const std::array<int, 3>& off, int levels) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(levels, levels);
  for (int64_t z = 0; z < m.dims[0]; ++z)
    for (int64_t y = 0; y < m.dims[1]; ++y)
      for (int64_t x = 0; x < m.dims[2]; ++x) {
        const int64_t z2 = z + off[0], y2 = y + off[1], x2 = x + off[2];
        if (!m.inside(z2, y2, x2)) continue;
        const int64_t i = m.index(z, y, x), j = m.index(z2, y2, x2);
        if (m.data[static_cast<size_t>(i)] <= 0.5f || m.data[static_cast<size_t>(j)] <= 0.5f) continue;
        const int a = q[static_cast<size_t>(i)] - 1, b = q[static_cast<size_t>(j)] - 1;
        P(a, b) += 1.0;
        P(b, a) += 1.0;
      }
  const double s = P.sum();
  if (s > 0) P /= s;
  return s > 0 ? P : Eigen::MatrixXd();
}

inline std::vector<double> glcm_features_of(const Eigen::MatrixXd& P) {
  const int L = static_cast<int>(P.rows());
  double contrast = 0, energy = 0, homog = 0, entropy = 0, mu = 0, sq = 0, cross = 0;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) {
      const double p = P(i, j);
      if (p == 0.0) continue;
      const double gi = i + 1, gj = j + 1;
      contrast += (gi - gj) * (gi - gj) * p;
      energy += p * p;
      homog += p / (1.0 + std::abs(gi - gj));
      entropy -= p * std::log2(p);
      mu += gi * p;
      sq += gi * gi * p;
      cross += gi * gj * p;
    }
  // symmetric matrix: both marginals share mean and variance
  const double var = sq - mu * mu;
  const double corr = var > 1e-12 ? (cross - mu * mu) / var : 1.0;
  return {contrast, corr, energy, homog, entropy};
}

// GLCM features averaged over the offsets that have at least one pair.
inline std::vector<double> glcm_features(const Volume& v, const Volume& m, int levels = kGlcmLevels) {
  const auto xs = detail::masked_values(v, m);
  if (xs.empty()) throw Error("glcm_features: empty mask");
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  std::vector<int> q(v.data.size(), 0);
  for (size_t i = 0; i < q.size(); ++i)
    if (m.data[i] > 0.5f) q[i] = detail::quantize(v.data[i], *lo, *hi, levels);
  std::vector<double> acc(glcm_names().size(), 0.0);
  int used = 0;
  for (const auto& off : glcm_offsets()) {
    const auto P = glcm_matrix(q, m, off, levels);
    if (P.size() == 0) continue;
    const auto f = glcm_features_of(P);
    for (size_t k = 0; k < f.size(); ++k) acc[k] += f[k];
    ++used;
  }
  // a lone voxel has no pairs: report the features of a single-entry matrix
  if (used == 0) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(levels, levels);
    P(0, 0) = 1.0;
    return glcm_features_of(P);
  }
  for (auto& a : acc) a /= used;
  return acc;
}

inline std::vector<std::string> radiomics_names() {
  std::vector<std::string> n;
  for (const auto& s : shape_names()) n.push_back("shape_" + s);
  for (const char* mod : {"pet", "ct"}) {
    for (const auto& s : first_order_names()) n.push_back(std::string(mod) + "_fo_" + s);
    for (const auto& s : glcm_names()) n.push_back(std::string(mod) + "_glcm_" + s);
    for (int b = 0; b < 8; ++b)
      for (const auto& s : first_order_names()) n.push_back(std::string(mod) + "_w" + haar_band_name(b) + "_" + s);
  }
  return n;
}

// Features of one lesion mask (PT and MLN merged) over PET and CT on the same grid.
inline std::vector<double> extract_features(const Volume& pet, const Volume& ct, const Volume& mask) {
  if (pet.dims != ct.dims || pet.dims != mask.dims) throw Error("extract_features: PET, CT and mask dims differ");
  const bool any = std::any_of(mask.data.begin(), mask.data.end(), [](float v) { return v > 0.5f; });
  if (!any) throw Error("extract_features: empty mask; fall back to a whole-volume bounding box");
  std::vector<double> out = shape_features(mask);
  const auto sub_mask = downsample_mask_any(mask);
  for (const Volume* v : {&pet, &ct}) {
    for (double f : first_order(detail::masked_values(*v, mask))) out.push_back(f);
    for (double f : glcm_features(*v, mask)) out.push_back(f);
    const auto bands = haar3d(*v);
    for (const auto& b : bands)
      for (double f : first_order(detail::masked_values(b, sub_mask))) out.push_back(f);
  }
  for (double f : out)
    if (!std::isfinite(f)) throw Error("extract_features: non-finite feature");
  return out;
}

// Union of the PT and MLN masks.
inline Volume merge_masks(const Volume& a, const Volume& b) {
  if (a.dims != b.dims) throw Error("merge_masks: dims differ");
  Volume m = a;
  m.modality = Modality::kMask;
  for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = (a.data[i] > 0.5f || b.data[i] > 0.5f) ? 1.0f : 0.0f;
  return m;
}

}  // namespace xsurv
