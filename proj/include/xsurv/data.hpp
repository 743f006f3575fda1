#pragma once

#include <array>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "xsurv/survival.hpp"
#include "xsurv/volume_ops.hpp"

namespace xsurv {

enum class Modality { kPet, kCt, kMask };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::kPet: return "PET";
    case Modality::kCt: return "CT";
    case Modality::kMask: return "MASK";
  }
  return "?";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "PET") return Modality::kPet;
  if (s == "CT") return Modality::kCt;
  if (s == "MASK") return Modality::kMask;
  throw Error("unknown modality: " + s);
}

using Vec3 = std::array<double, 3>;

struct Volume {
  Dims3 dims{0, 0, 0};  // D, H, W
  Vec3 spacing{1.0, 1.0, 1.0};  // mm
  Modality modality = Modality::kPet;
  std::vector<float> data;

  Volume() = default;
  Volume(Dims3 d, Modality m, float fill = 0.0f, Vec3 sp = {1.0, 1.0, 1.0})
      : dims(d), spacing(sp), modality(m), data(static_cast<size_t>(d[0] * d[1] * d[2]), fill) {
    validate();
  }

  int64_t size() const { return dims[0] * dims[1] * dims[2]; }
  int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  float& at(int64_t z, int64_t y, int64_t x) { return data[static_cast<size_t>(index(z, y, x))]; }
  float at(int64_t z, int64_t y, int64_t x) const { return data[static_cast<size_t>(index(z, y, x))]; }
  bool inside(int64_t z, int64_t y, int64_t x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims[0] && y < dims[1] && x < dims[2];
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0) throw Error("Volume: dims must be positive");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) throw Error("Volume: spacing must be positive");
    }
    if (static_cast<int64_t>(data.size()) != size()) throw Error("Volume: data size does not match dims");
  }

  // [1, 1, D, H, W]
  template <typename T = float>
  Tensor<T> to_tensor() const {
    return Tensor<T>::from({1, 1, dims[0], dims[1], dims[2]}, std::vector<T>(data.begin(), data.end()));
  }
};

// ---- volume file: one JSON header line, then f32le voxels ----

inline void save_volume(const std::string& path, const Volume& v) {
  v.validate();
  const nlohmann::json h{{"dims", v.dims}, {"spacing_mm", v.spacing}, {"modality", to_string(v.modality)}, {"dtype", "f32le"}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_volume: cannot open " + path);
  f << h.dump() << '\n';
  f.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (!f) throw Error("save_volume: write failed for " + path);
}

inline Volume load_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_volume: cannot open " + path);
  std::string line;
  std::getline(f, line);
  Volume v;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.at("dtype").get<std::string>() != "f32le") throw Error("load_volume: unsupported dtype in " + path);
    v.dims = h.at("dims").get<Dims3>();
    v.spacing = h.at("spacing_mm").get<Vec3>();
    v.modality = parse_modality(h.at("modality").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error("load_volume: malformed header in " + path + ": " + e.what());
  }
  for (int a = 0; a < 3; ++a)
    if (v.dims[a] <= 0) throw Error("load_volume: non-positive dims in " + path);
  const std::string rest{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (static_cast<int64_t>(rest.size()) != v.size() * 4)
    throw Error("load_volume: " + path + " holds " + std::to_string(rest.size()) + " payload bytes, header implies " +
                std::to_string(v.size() * 4));
  v.data.resize(static_cast<size_t>(v.size()));
  std::memcpy(v.data.data(), rest.data(), rest.size());
  v.validate();
  return v;
}

// ---- sampling helpers ----

// Trilinear sample at continuous voxel coords; outside reads `fill`.
inline float sample_linear(const Volume& v, double z, double y, double x, float fill = 0.0f) {
  const double fz = std::floor(z), fy = std::floor(y), fx = std::floor(x);
  const int64_t z0 = static_cast<int64_t>(fz), y0 = static_cast<int64_t>(fy), x0 = static_cast<int64_t>(fx);
  const double tz = z - fz, ty = y - fy, tx = x - fx;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx);
        if (w == 0.0) continue;
        const int64_t zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
        acc += w * (v.inside(zz, yy, xx) ? v.at(zz, yy, xx) : fill);
      }
  return static_cast<float>(acc);
}

inline float sample_nearest(const Volume& v, double z, double y, double x, float fill = 0.0f) {
  const int64_t zz = std::llround(z), yy = std::llround(y), xx = std::llround(x);
  return v.inside(zz, yy, xx) ? v.at(zz, yy, xx) : fill;
}

// Voxel-center aligned resample to a new spacing (grid origin kept).
inline Volume resample(const Volume& v, Vec3 spacing, bool nearest = false) {
  Dims3 d;
  for (int a = 0; a < 3; ++a)
    d[a] = std::max<int64_t>(1, std::llround(static_cast<double>(v.dims[a]) * v.spacing[a] / spacing[a]));
  Volume out(d, v.modality, 0.0f, spacing);
  for (int64_t z = 0; z < d[0]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[2]; ++x) {
        // clamp so edge voxels read the edge instead of the fill value
        const double sz = std::clamp(z * spacing[0] / v.spacing[0], 0.0, static_cast<double>(v.dims[0] - 1));
        const double sy = std::clamp(y * spacing[1] / v.spacing[1], 0.0, static_cast<double>(v.dims[1] - 1));
        const double sx = std::clamp(x * spacing[2] / v.spacing[2], 0.0, static_cast<double>(v.dims[2] - 1));
        out.at(z, y, x) = nearest ? sample_nearest(v, sz, sy, sx) : sample_linear(v, sz, sy, sx);
      }
  return out;
}

// side^3 crop whose center voxel is `center`; zero outside the source.
inline Volume crop_centered(const Volume& v, const std::array<int64_t, 3>& center, Dims3 side) {
  Volume out(side, v.modality, 0.0f, v.spacing);
  const int64_t oz = center[0] - side[0] / 2, oy = center[1] - side[1] / 2, ox = center[2] - side[2] / 2;
  for (int64_t z = 0; z < side[0]; ++z)
    for (int64_t y = 0; y < side[1]; ++y)
      for (int64_t x = 0; x < side[2]; ++x)
        if (v.inside(z + oz, y + oy, x + ox)) out.at(z, y, x) = v.at(z + oz, y + oy, x + ox);
  return out;
}

inline Volume crop_at(const Volume& v, const std::array<int64_t, 3>& origin, Dims3 side) {
  return crop_centered(v, {origin[0] + side[0] / 2, origin[1] + side[1] / 2, origin[2] + side[2] / 2}, side);
}

inline Volume gaussian_blur(const Volume& v, double sigma_mm) {
  Volume out = v;
  for (int axis = 0; axis < 3; ++axis) {
    const double s = sigma_mm / v.spacing[axis];
    if (s <= 0.0) continue;
    const int r = static_cast<int>(std::ceil(3.0 * s));
    std::vector<double> k(static_cast<size_t>(2 * r + 1));
    double norm = 0.0;
    for (int i = -r; i <= r; ++i) norm += k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (s * s));
    for (auto& w : k) w /= norm;
    Volume src = out;
    for (int64_t z = 0; z < v.dims[0]; ++z)
      for (int64_t y = 0; y < v.dims[1]; ++y)
        for (int64_t x = 0; x < v.dims[2]; ++x) {
          std::array<int64_t, 3> p{z, y, x};
          double acc = 0.0;
          for (int i = -r; i <= r; ++i) {
            auto q = p;
            q[axis] = std::clamp<int64_t>(p[axis] + i, 0, v.dims[axis] - 1);
            acc += k[static_cast<size_t>(i + r)] * src.at(q[0], q[1], q[2]);
          }
          out.at(z, y, x) = static_cast<float>(acc);
        }
  }
  return out;
}

// ---- phantom generator ----

struct Range {
  double lo = 0.0, hi = 0.0;
  double mean() const { return 0.5 * (lo + hi); }
  double sd() const { return (hi - lo) / std::sqrt(12.0); }
  double draw(std::mt19937_64& rng) const { return std::uniform_real_distribution<double>(lo, hi)(rng); }
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  if (!j.is_array() || j.size() != 2) throw Error("range must be [lo, hi]");
  r.lo = j[0].get<double>();
  r.hi = j[1].get<double>();
}

struct PhantomSpec {
  int64_t grid = 48;
  Range pt_semi_axes_mm{4.0, 9.0};
  int mln_max = 3;  // count uniform in 0..mln_max
  Range mln_radius_mm{3.0, 6.0};
  double lesion_box_mm = 30.0;  // every lesion lies in this cube around the PT center
  Range pet_uptake{4.0, 10.0};  // PT SUV; MLN gets mln_uptake_factor of it
  Range mln_uptake_factor{0.6, 0.8};
  double pet_background = 1.0;
  double pet_blur_mm = 1.0;
  double pet_noise = 0.25;
  Range ct_tissue_hu{20.0, 60.0};
  double ct_noise_hu = 15.0;
  double ct_pt_offset_hu = 35.0;
  double ct_mln_offset_hu = -25.0;
  double beta_vol = 0.8;
  double beta_uptake = 0.8;
  double base_hazard = 1.0 / 1000.0;  // per day
  double censor_fraction = 0.5;
  uint64_t seed = 0;

  void validate() const {
    if (grid < 16) throw Error("PhantomSpec: grid must be >= 16");
    for (const auto* r : {&pt_semi_axes_mm, &mln_radius_mm, &pet_uptake, &mln_uptake_factor, &ct_tissue_hu})
      if (!(r->hi >= r->lo)) throw Error("PhantomSpec: empty range");
    if (pt_semi_axes_mm.lo <= 0 || mln_radius_mm.lo <= 0) throw Error("PhantomSpec: lesion sizes must be positive");
    if (mln_max < 0) throw Error("PhantomSpec: mln_max must be >= 0");
    if (lesion_box_mm / 2 + 2 > grid / 2.0) throw Error("PhantomSpec: lesion box does not fit the grid");
    if (!(censor_fraction >= 0.0 && censor_fraction < 1.0)) throw Error("PhantomSpec: censor_fraction must be in [0, 1)");
    if (!(base_hazard > 0.0)) throw Error("PhantomSpec: base_hazard must be positive");
  }

  nlohmann::json to_json() const {
    return {{"grid", grid},
            {"pt_semi_axes_mm", pt_semi_axes_mm},
            {"mln_max", mln_max},
            {"mln_radius_mm", mln_radius_mm},
            {"lesion_box_mm", lesion_box_mm},
            {"pet_uptake", pet_uptake},
            {"mln_uptake_factor", mln_uptake_factor},
            {"pet_background", pet_background},
            {"pet_blur_mm", pet_blur_mm},
            {"pet_noise", pet_noise},
            {"ct_tissue_hu", ct_tissue_hu},
            {"ct_noise_hu", ct_noise_hu},
            {"ct_pt_offset_hu", ct_pt_offset_hu},
            {"ct_mln_offset_hu", ct_mln_offset_hu},
            {"beta_vol", beta_vol},
            {"beta_uptake", beta_uptake},
            {"base_hazard", base_hazard},
            {"censor_fraction", censor_fraction},
            {"seed", seed}};
  }

  static PhantomSpec from_json(const nlohmann::json& j) {
    PhantomSpec s;
    const auto allowed = s.to_json();
    for (const auto& [k, v] : j.items())
      if (!allowed.contains(k)) throw Error("phantom: unknown key '" + k + "'");
    const auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
    };
    get("grid", s.grid);
    get("pt_semi_axes_mm", s.pt_semi_axes_mm);
    get("mln_max", s.mln_max);
    get("mln_radius_mm", s.mln_radius_mm);
    get("lesion_box_mm", s.lesion_box_mm);
    get("pet_uptake", s.pet_uptake);
    get("mln_uptake_factor", s.mln_uptake_factor);
    get("pet_background", s.pet_background);
    get("pet_blur_mm", s.pet_blur_mm);
    get("pet_noise", s.pet_noise);
    get("ct_tissue_hu", s.ct_tissue_hu);
    get("ct_noise_hu", s.ct_noise_hu);
    get("ct_pt_offset_hu", s.ct_pt_offset_hu);
    get("ct_mln_offset_hu", s.ct_mln_offset_hu);
    get("beta_vol", s.beta_vol);
    get("beta_uptake", s.beta_uptake);
    get("base_hazard", s.base_hazard);
    get("censor_fraction", s.censor_fraction);
    get("seed", s.seed);
    s.validate();
    return s;
  }
};

struct ClinicalRow {
  double age = 60.0;     // years
  double weight = 80.0;  // kg
  int male = 1;
  int hpv = -1;  // 1 positive, 0 negative, -1 unknown
  int chemo = 1;
};

inline std::vector<std::string> clinical_feature_names() {
  return {"age", "weight", "male", "hpv_positive", "hpv_unknown", "chemo"};
}

inline std::vector<double> clinical_features(const ClinicalRow& c) {
  return {c.age, c.weight, static_cast<double>(c.male), c.hpv == 1 ? 1.0 : 0.0, c.hpv == -1 ? 1.0 : 0.0,
          static_cast<double>(c.chemo)};
}

struct Ellipsoid {
  Vec3 center{};      // voxel coords (z, y, x)
  Vec3 semi_axes{};   // mm
  std::array<Vec3, 3> axes{};  // unit rows
  bool contains(const Vec3& p, const Vec3& spacing) const {
    double s = 0.0;
    Vec3 d{(p[0] - center[0]) * spacing[0], (p[1] - center[1]) * spacing[1], (p[2] - center[2]) * spacing[2]};
    for (int k = 0; k < 3; ++k) {
      const double c = axes[k][0] * d[0] + axes[k][1] * d[1] + axes[k][2] * d[2];
      s += c * c / (semi_axes[k] * semi_axes[k]);
    }
    return s <= 1.0;
  }
  double bound() const { return std::max({semi_axes[0], semi_axes[1], semi_axes[2]}); }
  double volume() const { return 4.0 / 3.0 * std::numbers::pi * semi_axes[0] * semi_axes[1] * semi_axes[2]; }
};

// Everything about one phantom except its voxels.
struct PhantomDraw {
  Ellipsoid pt;
  std::vector<Ellipsoid> mlns;
  double uptake = 0.0;      // PT uptake
  double mln_factor = 1.0;
  double ct_tissue = 40.0;
  double true_volume_mm3 = 0.0;  // analytic PT + MLN volume
  double vol_z = 0.0, uptake_z = 0.0;
  double hazard = 0.0;  // per day
  double censor_rate = 0.0;
  double event_time = 0.0, censor_time = 0.0;
  ClinicalRow clinical;
  SurvivalRecord record;
  uint64_t seed = 0;
};

namespace detail {

inline std::array<Vec3, 3> random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  const double a = u(rng), b = u(rng), c = u(rng);
  const double ca = std::cos(a), sa = std::sin(a), cb = std::cos(b), sb = std::sin(b), cc = std::cos(c), sc = std::sin(c);
  // Rz(a) Ry(b) Rx(c), rows
  return {{{ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc},
           {sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc},
           {-sb, cb * sc, cb * cc}}};
}

// PT ellipsoid plus 0..mln_max non-overlapping spheres, all inside the lesion
// box around the PT center.
inline void draw_geometry(const PhantomSpec& s, std::mt19937_64& rng, Ellipsoid& pt, std::vector<Ellipsoid>& mlns) {
  const double g = static_cast<double>(s.grid), half_box = s.lesion_box_mm / 2.0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    pt.semi_axes = {s.pt_semi_axes_mm.draw(rng), s.pt_semi_axes_mm.draw(rng), s.pt_semi_axes_mm.draw(rng)};
    pt.axes = random_rotation(rng);
    // the whole lesion box (plus a 2-voxel margin) stays inside the grid
    for (int a = 0; a < 3; ++a) pt.center[a] = Range{half_box + 2.0, g - 3.0 - half_box}.draw(rng);
    if (pt.bound() > half_box) continue;
    mlns.clear();
    const int k = std::uniform_int_distribution<int>(0, s.mln_max)(rng);
    bool ok = true;
    for (int i = 0; i < k && ok; ++i) {
      bool node_ok = false;
      for (int tries = 0; tries < 100 && !node_ok; ++tries) {
        Ellipsoid n;
        const double r = s.mln_radius_mm.draw(rng);
        n.semi_axes = {r, r, r};
        n.axes = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
        for (int a = 0; a < 3; ++a) n.center[a] = pt.center[a] + Range{-(half_box - r), half_box - r}.draw(rng);
        const auto gap = [&](const Ellipsoid& o) {
          double dd = 0.0;
          for (int a = 0; a < 3; ++a) dd += std::pow(n.center[a] - o.center[a], 2);
          return std::sqrt(dd) - n.bound() - o.bound();
        };
        node_ok = gap(pt) > 1.0;
        for (const auto& o : mlns) node_ok = node_ok && gap(o) > 1.0;
        if (node_ok) mlns.push_back(n);
      }
      ok = node_ok;
    }
    if (ok) return;
  }
  throw Error("draw_phantom: infeasible lesion geometry after 100 attempts; enlarge the grid or lesion box");
}

inline double total_volume(const Ellipsoid& pt, const std::vector<Ellipsoid>& mlns) {
  double v = pt.volume();
  for (const auto& n : mlns) v += n.volume();
  return v;
}

}  // namespace detail

// Standardization of the hazard covariates and the censoring rate, estimated
// from a fixed sample of the generator's own geometry.
struct PhantomCalibration {
  double volume_mean = 0.0, volume_sd = 1.0;
  double censor_rate = 0.0;  // E[c / (c + hazard)] = censor_fraction

  double hazard(const PhantomSpec& s, double volume, double uptake, double* vol_z = nullptr, double* uptake_z = nullptr) const {
    const double vz = (volume - volume_mean) / volume_sd;
    const double uz = s.pet_uptake.sd() > 0 ? (uptake - s.pet_uptake.mean()) / s.pet_uptake.sd() : 0.0;
    if (vol_z) *vol_z = vz;
    if (uptake_z) *uptake_z = uz;
    return s.base_hazard * std::exp(s.beta_vol * vz + s.beta_uptake * uz);
  }
};

inline PhantomCalibration calibrate_phantoms(const PhantomSpec& s, int samples = 20000) {
  s.validate();
  std::mt19937_64 rng(0x5eed);
  Ellipsoid pt;
  std::vector<Ellipsoid> mlns;
  std::vector<double> vol(static_cast<size_t>(samples)), upt(static_cast<size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    detail::draw_geometry(s, rng, pt, mlns);
    vol[static_cast<size_t>(i)] = detail::total_volume(pt, mlns);
    upt[static_cast<size_t>(i)] = s.pet_uptake.draw(rng);
  }
  PhantomCalibration c;
  c.volume_mean = std::accumulate(vol.begin(), vol.end(), 0.0) / samples;
  double sq = 0.0;
  for (double v : vol) sq += (v - c.volume_mean) * (v - c.volume_mean);
  c.volume_sd = std::max(std::sqrt(sq / samples), 1e-9);
  if (s.censor_fraction <= 0.0) return c;
  std::vector<double> hz(static_cast<size_t>(samples));
  for (size_t i = 0; i < hz.size(); ++i) hz[i] = c.hazard(s, vol[i], upt[i]);
  const auto frac = [&](double rate) {
    double f = 0.0;
    for (double h : hz) f += rate / (rate + h);
    return f / static_cast<double>(hz.size());
  };
  double lo = std::log(s.base_hazard) - 20.0, hi = std::log(s.base_hazard) + 20.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (frac(std::exp(mid)) < s.censor_fraction ? lo : hi) = mid;
  }
  c.censor_rate = std::exp(0.5 * (lo + hi));
  return c;
}

inline uint64_t phantom_seed(uint64_t spec_seed, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(spec_seed), static_cast<uint32_t>(spec_seed >> 32), static_cast<uint32_t>(index),
                    static_cast<uint32_t>(index >> 32)};
  std::array<uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<uint64_t>(out[0]) << 32) | out[1];
}

// Geometry, clinical row and survival for one phantom.
inline PhantomDraw draw_phantom(const PhantomSpec& s, uint64_t seed, const PhantomCalibration& cal) {
  s.validate();
  std::mt19937_64 rng(seed);
  PhantomDraw d;
  d.seed = seed;
  d.censor_rate = cal.censor_rate;
  detail::draw_geometry(s, rng, d.pt, d.mlns);
  d.uptake = s.pet_uptake.draw(rng);
  d.mln_factor = s.mln_uptake_factor.draw(rng);
  d.ct_tissue = s.ct_tissue_hu.draw(rng);
  d.true_volume_mm3 = detail::total_volume(d.pt, d.mlns);
  d.hazard = cal.hazard(s, d.true_volume_mm3, d.uptake, &d.vol_z, &d.uptake_z);
  d.event_time = std::exponential_distribution<double>(d.hazard)(rng);
  d.censor_time = cal.censor_rate > 0 ? std::exponential_distribution<double>(cal.censor_rate)(rng) : HUGE_VAL;
  d.record = {std::min(d.event_time, d.censor_time), d.censor_time < d.event_time};
  std::normal_distribution<double> nd;
  d.clinical.age = std::clamp(std::round(61.0 + 10.0 * nd(rng)), 32.0, 90.0);
  d.clinical.weight = std::clamp(std::round(80.0 + 17.0 * nd(rng)), 34.0, 160.0);
  d.clinical.male = std::bernoulli_distribution(0.83)(rng);
  const double h = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  d.clinical.hpv = h < 0.65 ? 1 : h < 0.76 ? 0 : -1;
  d.clinical.chemo = std::bernoulli_distribution(0.86)(rng);
  return d;
}

struct Phantom {
  Volume pet, ct, pt_mask, mln_mask;
  PhantomDraw draw;
};

inline Phantom render_phantom(const PhantomSpec& s, const PhantomDraw& d) {
  std::mt19937_64 rng(d.seed ^ 0x9e3779b97f4a7c15ULL);
  const Dims3 dims{s.grid, s.grid, s.grid};
  Phantom p{Volume(dims, Modality::kPet), Volume(dims, Modality::kCt), Volume(dims, Modality::kMask),
            Volume(dims, Modality::kMask), d};
  const Vec3 sp{1.0, 1.0, 1.0};
  for (int64_t z = 0; z < s.grid; ++z)
    for (int64_t y = 0; y < s.grid; ++y)
      for (int64_t x = 0; x < s.grid; ++x) {
        const Vec3 q{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        double pet = s.pet_background, ct = d.ct_tissue;
        if (d.pt.contains(q, sp)) {
          p.pt_mask.at(z, y, x) = 1.0f;
          pet = d.uptake;
          ct += s.ct_pt_offset_hu;
        } else {
          for (const auto& n : d.mlns)
            if (n.contains(q, sp)) {
              p.mln_mask.at(z, y, x) = 1.0f;
              pet = d.uptake * d.mln_factor;
              ct += s.ct_mln_offset_hu;
              break;
            }
        }
        p.pet.at(z, y, x) = static_cast<float>(pet);
        p.ct.at(z, y, x) = static_cast<float>(ct);
      }
  p.pet = gaussian_blur(p.pet, s.pet_blur_mm);
  std::normal_distribution<double> nd;
  for (auto& v : p.pet.data) v = static_cast<float>(std::max(0.0, v + s.pet_noise * nd(rng)));
  for (auto& v : p.ct.data) v = static_cast<float>(v + s.ct_noise_hu * nd(rng));
  return p;
}

inline Phantom generate_phantom(const PhantomSpec& s, uint64_t index, const PhantomCalibration& cal) {
  return render_phantom(s, draw_phantom(s, phantom_seed(s.seed, index), cal));
}

inline Phantom generate_phantom(const PhantomSpec& s, uint64_t index) { return generate_phantom(s, index, calibrate_phantoms(s)); }

// Largest distance between the empirical CDF of xs and cdf.
template <typename F>
double ks_distance(std::vector<double> xs, F cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - f)});
  }
  return d;
}

// ---- preprocessing ----

struct PreprocessOptions {
  int64_t out_side = 40;
  double ct_clip = 1024.0;
  double spacing_mm = 1.0;  // isotropic output spacing
};

// Resample to isotropic spacing (1 mm by default), crop out_side^3 around `center` (voxel coords of the
// input grid), Z-score PET over the crop, clip CT and map to [-1, 1].
inline std::pair<Volume, Volume> preprocess(const Volume& pet, const Volume& ct, const Vec3& center,
                                            const PreprocessOptions& opt = {}) {
  pet.validate();
  ct.validate();
  const Vec3 iso{opt.spacing_mm, opt.spacing_mm, opt.spacing_mm};
  auto p = pet.spacing == iso ? pet : resample(pet, iso);
  auto c = ct.spacing == iso ? ct : resample(ct, iso);
  if (p.dims != c.dims) throw ShapeError("preprocess: PET and CT grids differ after resampling");
  std::array<int64_t, 3> ctr{};
  for (int a = 0; a < 3; ++a) ctr[a] = std::llround(center[a] * pet.spacing[a] / iso[a]);
  const Dims3 side{opt.out_side, opt.out_side, opt.out_side};
  p = crop_centered(p, ctr, side);
  c = crop_centered(c, ctr, side);
  double mean = 0.0, sq = 0.0;
  for (float v : p.data) mean += v;
  mean /= static_cast<double>(p.data.size());
  for (float v : p.data) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(p.data.size()));
  for (auto& v : p.data) v = static_cast<float>(sd > 0 ? (v - mean) / sd : 0.0);
  for (auto& v : c.data) v = static_cast<float>(std::clamp<double>(v, -opt.ct_clip, opt.ct_clip) / opt.ct_clip);
  return {p, c};
}

// Masks follow the image crop with nearest-neighbour resampling.
inline Volume preprocess_mask(const Volume& mask, const Vec3& center, const PreprocessOptions& opt = {}) {
  const Vec3 iso{opt.spacing_mm, opt.spacing_mm, opt.spacing_mm};
  auto m = mask.spacing == iso ? mask : resample(mask, iso, true);
  std::array<int64_t, 3> ctr{};
  for (int a = 0; a < 3; ++a) ctr[a] = std::llround(center[a] * mask.spacing[a] / iso[a]);
  return crop_centered(m, ctr, {opt.out_side, opt.out_side, opt.out_side});
}

// ---- augmentation ----

struct AugmentParams {
  Vec3 rotation_rad{0, 0, 0};  // about z, y, x
  double scale = 1.0;
  Vec3 translation{0, 0, 0};  // voxels
  std::array<int64_t, 3> crop_origin{0, 0, 0};
  int64_t side = 32;

  static AugmentParams identity(Dims3 dims, int64_t side) {
    AugmentParams p;
    p.side = side;
    for (int a = 0; a < 3; ++a) p.crop_origin[a] = (dims[a] - side) / 2;
    return p;
  }
};

struct AugmentOptions {
  double max_rotation_deg = 10.0;
  Range scale{0.9, 1.1};
  double max_translation = 5.0;
};

inline AugmentParams sample_augment(Dims3 dims, int64_t side, std::mt19937_64& rng, const AugmentOptions& o = {}) {
  AugmentParams p;
  p.side = side;
  const double r = o.max_rotation_deg * std::numbers::pi / 180.0;
  for (auto& a : p.rotation_rad) a = Range{-r, r}.draw(rng);
  p.scale = o.scale.draw(rng);
  for (auto& t : p.translation) t = Range{-o.max_translation, o.max_translation}.draw(rng);
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < side) throw Error("augment: volume smaller than the crop side");
    p.crop_origin[a] = std::uniform_int_distribution<int64_t>(0, dims[a] - side)(rng);
  }
  return p;
}

// x_out = c + s R (x_in - c) + t about the volume center c; output grid is
// the crop. Images trilinear, masks nearest.
inline Volume apply_augment(const Volume& v, const AugmentParams& p, bool nearest) {
  const auto rz = p.rotation_rad[0], ry = p.rotation_rad[1], rx = p.rotation_rad[2];
  const double cz = std::cos(rz), sz = std::sin(rz), cy = std::cos(ry), sy = std::sin(ry), cx = std::cos(rx), sx = std::sin(rx);
  // Rz Ry Rx, applied to (z, y, x) index vectors
  const double R[3][3] = {{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
                          {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
                          {-sy, cy * sx, cy * cx}};
  const Vec3 c{(v.dims[0] - 1) / 2.0, (v.dims[1] - 1) / 2.0, (v.dims[2] - 1) / 2.0};
  Volume out({p.side, p.side, p.side}, v.modality, 0.0f, v.spacing);
  for (int64_t z = 0; z < p.side; ++z)
    for (int64_t y = 0; y < p.side; ++y)
      for (int64_t x = 0; x < p.side; ++x) {
        const Vec3 o{static_cast<double>(z + p.crop_origin[0]), static_cast<double>(y + p.crop_origin[1]),
                     static_cast<double>(x + p.crop_origin[2])};
        Vec3 d;
        for (int a = 0; a < 3; ++a) d[a] = (o[a] - c[a] - p.translation[a]) / p.scale;
        Vec3 q;  // R^T d
        for (int a = 0; a < 3; ++a) q[a] = c[a] + R[0][a] * d[0] + R[1][a] * d[1] + R[2][a] * d[2];
        out.at(z, y, x) = nearest ? sample_nearest(v, q[0], q[1], q[2]) : sample_linear(v, q[0], q[1], q[2]);
      }
  return out;
}

struct Sample {
  Volume pet, ct, pt_mask, mln_mask;
};

inline Sample augment(const Sample& s, const AugmentParams& p) {
  return {apply_augment(s.pet, p, false), apply_augment(s.ct, p, false), apply_augment(s.pt_mask, p, true),
          apply_augment(s.mln_mask, p, true)};
}

inline Sample center_crop(const Sample& s, int64_t side) {
  const Dims3 d{side, side, side};
  const std::array<int64_t, 3> c{s.pet.dims[0] / 2, s.pet.dims[1] / 2, s.pet.dims[2] / 2};
  return {crop_centered(s.pet, c, d), crop_centered(s.ct, c, d), crop_centered(s.pt_mask, c, d), crop_centered(s.mln_mask, c, d)};
}

// ---- manifest ----

struct ManifestRow {
  std::string id, split;  // split: train | test
  std::string pet, ct, pt_mask, mln_mask;  // paths relative to the manifest
  ClinicalRow clinical;
  SurvivalRecord record;
  Vec3 center{};  // crop center, voxel coords
};

inline const std::vector<std::string>& manifest_columns() {
  static const std::vector<std::string> cols{"id",     "split", "pet",  "ct",    "pt_mask",   "mln_mask",  "age",
                                             "weight", "male",  "hpv",  "chemo", "time_days", "censored", "center_z",
                                             "center_y", "center_x"};
  return cols;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path);
  if (!f) throw Error("write_manifest: cannot open " + path);
  const auto& cols = manifest_columns();
  for (size_t i = 0; i < cols.size(); ++i) f << (i ? "\t" : "") << cols[i];
  f << '\n';
  f.precision(17);
  for (const auto& r : rows)
    f << r.id << '\t' << r.split << '\t' << r.pet << '\t' << r.ct << '\t' << r.pt_mask << '\t' << r.mln_mask << '\t'
      << r.clinical.age << '\t' << r.clinical.weight << '\t' << r.clinical.male << '\t' << r.clinical.hpv << '\t'
      << r.clinical.chemo << '\t' << r.record.time_days << '\t' << (r.record.censored ? 1 : 0) << '\t' << r.center[0]
      << '\t' << r.center[1] << '\t' << r.center[2] << '\n';
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_manifest: cannot open " + path);
  std::string line;
  std::getline(f, line);
  std::vector<std::string> head;
  {
    std::istringstream s(line);
    for (std::string c; std::getline(s, c, '\t');) head.push_back(c);
  }
  if (head != manifest_columns()) throw Error("read_manifest: unexpected header in " + path);
  std::vector<ManifestRow> rows;
  for (int ln = 2; std::getline(f, line); ++ln) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::istringstream s(line);
    for (std::string x; std::getline(s, x, '\t');) c.push_back(x);
    if (c.size() != head.size()) throw Error(path + ":" + std::to_string(ln) + ": wrong number of columns");
    try {
      ManifestRow r;
      r.id = c[0];
      r.split = c[1];
      r.pet = c[2];
      r.ct = c[3];
      r.pt_mask = c[4];
      r.mln_mask = c[5];
      r.clinical = {std::stod(c[6]), std::stod(c[7]), std::stoi(c[8]), std::stoi(c[9]), std::stoi(c[10])};
      r.record = {std::stod(c[11]), std::stoi(c[12]) != 0};
      r.center = {std::stod(c[13]), std::stod(c[14]), std::stod(c[15])};
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(path + ":" + std::to_string(ln) + ": malformed number");
    }
  }
  return rows;
}

// Loads and preprocesses one manifest row; masks binarized at 0.5.
inline Sample load_sample(const ManifestRow& r, const std::filesystem::path& base, const PreprocessOptions& opt = {}) {
  const auto p = [&](const std::string& rel) { return (base / rel).string(); };
  const auto pet = load_volume(p(r.pet)), ct = load_volume(p(r.ct));
  auto [pp, cc] = preprocess(pet, ct, r.center, opt);
  Sample s{std::move(pp), std::move(cc), {}, {}};
  for (auto [src, dst] : {std::pair{&r.pt_mask, &s.pt_mask}, std::pair{&r.mln_mask, &s.mln_mask}}) {
    *dst = preprocess_mask(load_volume(p(*src)), r.center, opt);
    for (auto& v : dst->data) v = v > 0.5f ? 1.0f : 0.0f;
  }
  return s;
}

// Voxel centroid of a mask (voxel coords); grid center when empty.
inline Vec3 mask_centroid(const Volume& m) {
  Vec3 acc{0, 0, 0};
  double n = 0;
  for (int64_t z = 0; z < m.dims[0]; ++z)
    for (int64_t y = 0; y < m.dims[1]; ++y)
      for (int64_t x = 0; x < m.dims[2]; ++x)
        if (m.at(z, y, x) > 0.5f) {
          acc[0] += static_cast<double>(z);
          acc[1] += static_cast<double>(y);
          acc[2] += static_cast<double>(x);
          n += 1;
        }
  if (n == 0) return {(m.dims[0] - 1) / 2.0, (m.dims[1] - 1) / 2.0, (m.dims[2] - 1) / 2.0};
  return {acc[0] / n, acc[1] / n, acc[2] / n};
}

}  // namespace xsurv
