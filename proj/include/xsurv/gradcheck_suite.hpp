#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "xsurv/blocks.hpp"
#include "xsurv/gradcheck.hpp"
#include "xsurv/model.hpp"
#include "xsurv/segmentation.hpp"
#include "xsurv/survival.hpp"

// Finite-difference suites shared by the gradcheck command and the
// acceptance run.
namespace xsurv::gradsuite {

struct Entry {
  std::string name;
  GradCheckReport rep;
};

inline bool all_pass(const std::vector<Entry>& es) {
  return std::all_of(es.begin(), es.end(), [](const Entry& e) { return e.rep.pass; });
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Buffer<T> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

// Sum with fixed random weights so every output element matters.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Buffer<T> w(static_cast<size_t>(y.numel()));
  for (auto& x : w) x = static_cast<T>(u(rng));
  return sum(mul(y, Tensor<T>::from(y.shape(), std::move(w))));
}

inline GradCheckOptions op_options() {
  GradCheckOptions o;
  o.step = 1e-5;
  o.tol = 1e-4;
  return o;
}

// Composite blocks have many leaky-ReLU inputs downstream of each parameter;
// the smaller step avoids straddling a kink.
inline GradCheckOptions block_options() {
  GradCheckOptions o = op_options();
  o.step = 1e-6;
  return o;
}

template <typename T>
std::vector<Tensor<T>> tensors_of(const ParameterSet<T>& ps) {
  std::vector<Tensor<T>> out;
  for (const auto& p : ps.items()) out.push_back(p.tensor);
  return out;
}

// Every differentiable op on one random shape (index 0..4), 64-bit.
inline std::vector<Entry> op_suite(int shape_index) {
  using TD = Tensor<double>;
  std::vector<Entry> out;
  std::mt19937_64 rng(static_cast<uint64_t>(shape_index) * 7919 + 11);
  std::uniform_int_distribution<int> dim(2, 4);
  const int64_t n = 1 + shape_index % 2, c = dim(rng), d = dim(rng), h = dim(rng), w = dim(rng);
  const Shape vol{n, c, d * 2, h * 2, w * 2};
  const auto check = [&](const std::string& name, std::function<TD()> f, std::vector<TD> in) {
    out.push_back({name, gradient_check<double>(f, in, op_options())});
  };
  const auto rt = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor<double>(std::move(s), rng, lo, hi); };
  auto a = rt({c, d, h}), b = rt({c, d, h}), bc = rt({1, d, 1}), pos = rt({c, d, h}, 0.2, 2.0);
  check("add", [&] { return weighted_sum(add(a, b)); }, {a, b});
  check("add_broadcast", [&] { return weighted_sum(add(a, bc)); }, {a, bc});
  check("subtract", [&] { return weighted_sum(sub(a, bc)); }, {a, bc});
  check("multiply", [&] { return weighted_sum(mul(a, b)); }, {a, b});
  check("divide", [&] { return weighted_sum(div(a, pos)); }, {a, pos});
  auto m1 = rt({c, d}), m2 = rt({d, h});
  check("matmul", [&] { return weighted_sum(matmul(m1, m2)); }, {m1, m2});
  check("concat", [&] { return weighted_sum(concat<double>({a, b}, 1)); }, {a, b});
  check("slice", [&] { return weighted_sum(slice(a, 2, 1, h - 1)); }, {a});
  check("reshape", [&] { return weighted_sum(reshape(a, {-1, h})); }, {a});
  check("permute", [&] { return weighted_sum(permute(a, {2, 0, 1})); }, {a});
  check("exp", [&] { return weighted_sum(exp(a)); }, {a});
  check("log", [&] { return weighted_sum(log(pos)); }, {pos});
  check("relu", [&] { return weighted_sum(relu(a)); }, {a});
  check("leaky_relu", [&] { return weighted_sum(leaky_relu(a, 0.01)); }, {a});
  check("sigmoid", [&] { return weighted_sum(sigmoid(a)); }, {a});
  check("gelu", [&] { return weighted_sum(gelu(a)); }, {a});
  check("softmax", [&] { return weighted_sum(softmax(a, shape_index % 3)); }, {a});
  check("sum", [&] { return sum(mul(a, a)); }, {a});
  check("mean", [&] { return mean(mul(a, b)); }, {a, b});
  check("sum_axis", [&] { return weighted_sum(sum_axis(a, 1, true)); }, {a});
  check("pow", [&] { return weighted_sum(pow_scalar(pos, 2.5)); }, {pos});
  check("clamp", [&] { return weighted_sum(clamp(a, -0.5, 0.5)); }, {a});
  auto x = rt(vol), wk = rt({c + 1, c, 3, 3, 3}), bk = rt({c + 1}), w1 = rt({c + 1, c, 1, 1, 1});
  check("conv3d", [&] { return weighted_sum(conv3d(x, wk, bk, 1, 1)); }, {x, wk, bk});
  check("conv3d_stride2", [&] { return weighted_sum(conv3d(x, wk, bk, 2, 1)); }, {x, wk, bk});
  check("conv3d_pointwise", [&] { return weighted_sum(conv3d(x, w1, bk, 1, 0)); }, {x, w1, bk});
  check("trilinear_upsample", [&] { return weighted_sum(upsample2x(x)); }, {x});
  check("resize_trilinear", [&] { return weighted_sum(resize_trilinear(x, {d + 1, 3, w * 3})); }, {x});
  auto gam = rt({c}, 0.5, 1.5), bet = rt({c});
  check("instance_norm", [&] { return weighted_sum(instance_norm(x, gam, bet)); }, {x, gam, bet});
  check("channel_layer_norm", [&] { return weighted_sum(channel_layer_norm(x, gam, bet)); }, {x, gam, bet});
  auto feats = rt({n, c * 2}), lw = rt({3, c * 2}), lb = rt({3});
  check("linear", [&] { return weighted_sum(linear(feats, lw, lb)); }, {feats, lw, lb});
  check("max_pool", [&] { return weighted_sum(max_pool3d(x)); }, {x});
  check("avg_pool", [&] { return weighted_sum(avg_pool3d(x)); }, {x});
  check("global_avg_pool", [&] { return weighted_sum(global_avg_pool(x)); }, {x});
  check("pad_crop", [&] { return weighted_sum(crop_spatial(pad_spatial(x, {d * 2 + 1, h * 2, w * 2 + 2}), {d, h, w})); }, {x});
  check("dropout_train", [&] {
    std::mt19937_64 fixed(7);
    return weighted_sum(dropout(a, 0.5, true, fixed));
  }, {a});
  const int64_t heads = 1 + shape_index % 2;
  auto q = rt({n, heads * 2, 3 + shape_index % 2, 4, 3}), k = rt(q.shape()), v = rt(q.shape());
  auto table = rt({heads, relative_table_size({2, 3, 2})});
  for (bool shifted : {false, true})
    check(shifted ? "window_attention_shifted" : "window_attention",
          [&] { return weighted_sum(window_attention(q, k, v, table, heads, {2, 3, 2}, shifted)); }, {q, k, v, table});
  // losses on probabilities
  auto p = rt({n, 1, d, h, w}, 0.05, 0.95);
  Buffer<double> gv(static_cast<size_t>(p.numel()));
  for (auto& e : gv) e = std::bernoulli_distribution(0.4)(rng) ? 1.0 : 0.0;
  const auto g = Tensor<double>::from(p.shape(), gv);
  check("dice_loss", [&] { return dice_loss(p, g); }, {p});
  check("focal_loss", [&] { return focal_loss(p, g); }, {p});
  auto sp = rt({n + 1, 4}, 0.05, 0.95);
  std::vector<SurvivalLabels> labels;
  const IntervalScheme scheme{{0.0, 1.0, 2.0, 3.0, 4.0}};
  for (int64_t i = 0; i <= n; ++i) labels.push_back(make_labels({0.5 + 1.1 * static_cast<double>(i), i % 2 == 0}, scheme));
  check("survival_loss", [&] { return survival_loss(sp, labels); }, {sp});
  return out;
}

// Negative control: sigmoid whose backward drops the (1 - y) factor. Must fail.
inline Entry corrupted_op() {
  std::mt19937_64 rng(3);
  auto a = random_tensor<double>({3, 4}, rng);
  const auto bad_sigmoid = [](const Tensor<double>& x) {
    return xsurv::detail::unary(
        x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y; });
  };
  return {"corrupted_sigmoid", gradient_check<double>([&] { return weighted_sum(bad_sigmoid(a)); }, {a}, op_options())};
}

namespace detail {

template <typename T>
struct Built {
  ParameterSet<T> params;
  std::mt19937_64 rng;
  BuildContext<T> ctx{params, rng};
  explicit Built(uint64_t seed) : rng(seed) {}
};

inline BlockConfig hybrid_cfg(int64_t cin, int64_t cout) { return {cin, cout, 2, 2, 2, {3, 3, 3}}; }

}  // namespace detail

// Every model block on one random shape (index 0..4), 64-bit, all
// parameters and inputs checked element-wise (HPCA samples its parameters).
inline std::vector<Entry> block_suite(int i) {
  using TD = Tensor<double>;
  std::vector<Entry> out;
  const auto seed = static_cast<uint64_t>(i);
  const auto run = [&](const std::string& name, std::function<TD()> f, std::vector<TD> in, GradCheckOptions o = block_options()) {
    out.push_back({name, gradient_check<double>(f, in, o)});
  };
  const auto with_params = [](const ParameterSet<double>& ps, std::initializer_list<TD> xs) {
    auto v = tensors_of(ps);
    v.insert(v.end(), xs);
    return v;
  };
  std::mt19937_64 rng(seed + 1000);
  const Dims3 sp[] = {{4, 4, 4}, {3, 5, 4}, {5, 4, 3}, {4, 3, 3}, {3, 3, 4}};
  const Dims3 s = sp[i];
  const int64_t nb = i == 4 ? 2 : 1;
  const auto vol = [&](int64_t c) { return random_tensor<double>({nb, c, s[0], s[1], s[2]}, rng); };
  {
    detail::Built<double> b(seed);
    ConvBlock<double> blk(b.ctx, "conv", {2, 3, 2, 0, 0, {5, 5, 5}});
    auto x = vol(2);
    run("conv_block", [&] { return weighted_sum(blk(x)); }, with_params(b.params, {x}));
  }
  for (bool shifted : {false, true}) {
    detail::Built<double> b(seed + 1);
    WindowTransformerBlock<double> blk(b.ctx, "self", 4, 2, {3, 3, 3}, shifted, false);
    auto x = vol(4);
    run(shifted ? "window_self_attention_shifted" : "window_self_attention", [&] { return weighted_sum(blk(x)); },
        with_params(b.params, {x}));
  }
  for (bool shifted : {false, true}) {
    detail::Built<double> b(seed + 2);
    WindowTransformerBlock<double> blk(b.ctx, "cross", 4, 2, {3, 3, 3}, shifted, true);
    auto x = vol(4), o = vol(4);
    run(shifted ? "window_cross_attention_shifted" : "window_cross_attention", [&] { return weighted_sum(blk(x, &o)); },
        with_params(b.params, {x, o}));
  }
  {
    detail::Built<double> b(seed + 3);
    const int64_t cin = i % 2 ? 2 : 4;
    HpsaBlock<double> blk(b.ctx, "hpsa", detail::hybrid_cfg(cin, 4));
    auto x = vol(cin);
    run("hpsa", [&] { return weighted_sum(blk(x)); }, with_params(b.params, {x}));
  }
  {
    detail::Built<double> b(seed + 4);
    const int64_t cin = i % 2 ? 2 : 4;
    HpcaBlock<double> blk(b.ctx, "hpca", detail::hybrid_cfg(cin, 4));
    auto x = vol(cin), o = vol(cin);
    auto opt = block_options();
    opt.max_elements = 300;
    run("hpca", [&] { return weighted_sum(blk(x, o)); }, with_params(b.params, {x, o}), opt);
  }
  {
    detail::Built<double> b(seed + 5);
    RagBlock<double> rag(b.ctx, "rag", 3, 4, 2, 3);
    const auto g = [&](int a) { return (s[static_cast<size_t>(a)] + 1) / 2; };
    auto xs = vol(3);
    auto gp = random_tensor<double>({nb, 4, g(0), g(1), g(2)}, rng), gm = random_tensor<double>({nb, 2, g(0), g(1), g(2)}, rng);
    run("rag",
        [&] {
          auto o = rag(xs, gp, gm);
          return add(add(weighted_sum(o.x_pt, 1), weighted_sum(o.x_mln, 2)), weighted_sum(o.alpha_bg, 3));
        },
        with_params(b.params, {xs, gp, gm}));
  }
  {
    detail::Built<double> b(seed + 6);
    VanillaAttentionGate<double> ag(b.ctx, "ag", 3, 4, 2);
    const auto g = [&](int a) { return (s[static_cast<size_t>(a)] + 1) / 2; };
    auto xs = vol(3);
    auto gt = random_tensor<double>({nb, 4, g(0), g(1), g(2)}, rng);
    run("vanilla_gate", [&] { return weighted_sum(ag(xs, gt).second); }, with_params(b.params, {xs, gt}));
  }
  {
    detail::Built<double> b(seed + 7);
    SegmentationHead<double> head(b.ctx, "seg", 4);
    auto x = vol(4);
    run("segmentation_head", [&] { return weighted_sum(head(x)); }, with_params(b.params, {x}));
  }
  {
    detail::Built<double> b(seed + 8);
    const int64_t f = 4 + i;
    SurvivalHead<double> head(b.ctx, "surv", f, 8, 10, 0.3);
    auto x = random_tensor<double>({2, f}, rng);
    run("survival_head", [&] { return weighted_sum(head(x, false, nullptr)); }, with_params(b.params, {x}));
  }
  return out;
}

namespace detail {

// Combined loss of a forward pass against fixed random targets.
template <typename T>
Tensor<T> model_loss(const XSurvModel<T>& m, const Tensor<T>& pet, const Tensor<T>& ct, const Tensor<T>& gpt,
                     const Tensor<T>& gmln, const std::vector<SurvivalLabels>& labels) {
  const auto f = m.forward(pet, ct, false, nullptr);
  Tensor<T> lp, lm;
  if (f.pt_prob) lp = segmentation_loss(f.pt_prob, gpt);
  if (f.mln_prob) lm = segmentation_loss(f.mln_prob, gmln);
  return combined_loss(survival_loss(f.s_pred, labels), lp, lm, 1.0);
}

template <typename T>
struct ModelFixture {
  Tensor<T> pet, ct, gpt, gmln;
  std::vector<SurvivalLabels> labels;

  ModelFixture(int64_t nb, int64_t side, int intervals, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    const Shape s{nb, 1, side, side, side};
    const auto img = [&] {
      Buffer<T> v(static_cast<size_t>(numel_of(s)));
      for (auto& x : v) x = static_cast<T>(nd(rng));
      return Tensor<T>::from(s, std::move(v));
    };
    const auto mask = [&] {
      Buffer<T> v(static_cast<size_t>(numel_of(s)));
      for (auto& x : v) x = std::bernoulli_distribution(0.3)(rng) ? T(1) : T(0);
      return Tensor<T>::from(s, std::move(v));
    };
    pet = img();
    ct = img();
    gpt = mask();
    gmln = mask();
    IntervalScheme scheme;
    for (int k = 0; k <= intervals; ++k) scheme.edges.push_back(static_cast<double>(k));
    for (int64_t i = 0; i < nb; ++i)
      labels.push_back(make_labels({0.5 + static_cast<double>((i * 3) % intervals), i % 2 == 1}, scheme));
  }
};

// Moves parameters off their initial values. Zero-initialised norm shifts
// put single-voxel activations exactly on the leaky-ReLU kink.
template <typename T>
void jitter(ParameterSet<T>& ps, uint64_t seed, double sd = 0.05) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& p : ps.items())
    for (auto& v : p.tensor.values()) v = static_cast<T>(static_cast<double>(v) + nd(rng));
}

}  // namespace detail

// Tiny model on side^3 inputs, 64-bit; a few random elements of every
// parameter tensor plus all input voxels.
inline std::vector<Entry> model_suite(int64_t side = 6, int64_t per_tensor = 2) {
  std::vector<Entry> out;
  for (Ablation ab : {Ablation::kFull, Ablation::kEarlyFusion, Ablation::kDualNoAg, Ablation::kDualVanillaAg}) {
    XSurvModel<double> m(ablation_config(tiny_config(), ab), 3);
    detail::jitter(m.params(), 8);
    detail::ModelFixture<double> fx(2, side, m.config().N_intervals, 4);
    auto opt = block_options();
    opt.max_elements = per_tensor;
    auto inputs = tensors_of(m.params());
    auto rep = gradient_check<double>([&] { return detail::model_loss(m, fx.pet, fx.ct, fx.gpt, fx.gmln, fx.labels); }, inputs, opt);
    out.push_back({"model_" + to_string(ab), rep});
  }
  return out;
}

// Parameter groups: the first three name components (two for skip convs).
inline std::string param_group(const std::string& name) {
  const int parts = name.rfind("skip.", 0) == 0 ? 2 : 3;
  size_t pos = 0;
  for (int k = 0; k < parts; ++k) {
    pos = name.find('.', k == 0 ? 0 : pos + 1);
    if (pos == std::string::npos) return name;
  }
  return name.substr(0, pos);
}

namespace detail {

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  Buffer<To> v(static_cast<size_t>(t.numel()));
  const auto src = t.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(src[i]);
  return Tensor<To>::from(t.shape(), std::move(v));
}

}  // namespace detail

// 32-bit gradients of a full model against central differences. Float
// forward passes are too noisy for a usable step, so the differences are
// taken on a 64-bit copy with identical weights and inputs.
inline std::vector<Entry> model_suite_f32(const ModelConfig& cfg, int64_t side, int64_t per_tensor = 1,
                                          double tol = 1e-2, uint64_t seed = 5) {
  XSurvModel<float> m32(cfg, seed);
  detail::jitter(m32.params(), seed + 4);
  XSurvModel<double> m64(cfg, seed);
  auto& p32 = m32.params().items();
  auto& p64 = m64.params().items();
  for (size_t i = 0; i < p32.size(); ++i) {
    const auto src = p32[i].tensor.values();
    auto dst = p64[i].tensor.values();
    for (size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<double>(src[j]);
  }
  detail::ModelFixture<float> fx(1, side, cfg.N_intervals, seed + 1);
  const auto pet = detail::cast_tensor<double>(fx.pet), ct = detail::cast_tensor<double>(fx.ct);
  const auto gpt = detail::cast_tensor<double>(fx.gpt), gmln = detail::cast_tensor<double>(fx.gmln);
  for (auto& p : p32) p.tensor.zero_grad();
  backward(detail::model_loss(m32, fx.pet, fx.ct, fx.gpt, fx.gmln, fx.labels));
  const auto eval = [&] {
    NoGradGuard ng;
    return detail::model_loss(m64, pet, ct, gpt, gmln, fx.labels).item();
  };
  // 16^3 first-stage activations cross leaky-ReLU kinks at a 1e-6 step.
  auto opt = block_options();
  opt.step = 1e-7;
  std::mt19937_64 rng(seed + 2);
  std::vector<Entry> out;
  for (size_t i = 0; i < p32.size(); ++i) {
    const auto g = p32[i].tensor.grad();
    auto v = p64[i].tensor.values();
    GradCheckReport rep;
    rep.pass = true;
    const int64_t n = static_cast<int64_t>(v.size());
    for (int64_t k = 0; k < std::min(per_tensor, n); ++k) {
      const auto j = static_cast<size_t>(per_tensor >= n ? k : std::uniform_int_distribution<int64_t>(0, n - 1)(rng));
      const double x0 = v[j];
      v[j] = x0 + opt.step;
      const double fp = eval();
      v[j] = x0 - opt.step;
      const double fm = eval();
      v[j] = x0;
      const double num = (fp - fm) / (2.0 * opt.step), ana = g[j];
      const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), opt.floor});
      rep.finite = rep.finite && std::isfinite(num) && std::isfinite(ana);
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = "[" + std::to_string(j) + "]";
      }
    }
    rep.pass = rep.finite && rep.max_rel_err <= tol;
    out.push_back({p32[i].name, rep});
  }
  return out;
}

}  // namespace xsurv::gradsuite
