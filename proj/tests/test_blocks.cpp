#include <gtest/gtest.h>

#include <cmath>

#include "xsurv/blocks.hpp"
#include "test_support.hpp"

namespace xsurv {
namespace {

using namespace xsurv::testing;

// Windowed attention computed in original grid coordinates: along each axis the
// grid is cut at `shift + k * window` (plain multiples of window when
// unshifted); a query attends to every in-volume key of its cell, with the
// bias looked up by the coordinate offset in a table sized for `table_window`.
std::vector<double> windowed_attention_oracle(const TD& q, const TD& k, const TD& v, const TD& table,
                                              int64_t heads, Dims3 table_window, bool shifted) {
  const int64_t n = q.dim(0), c = q.dim(1), hd = c / heads;
  const Dims3 dims{q.dim(2), q.dim(3), q.dim(4)};
  const int64_t vox = dims[0] * dims[1] * dims[2];
  Dims3 w{}, s{};
  for (int a = 0; a < 3; ++a) {
    w[a] = std::min(table_window[a], dims[a]);
    s[a] = (shifted && dims[a] > w[a]) ? w[a] / 2 : 0;
  }
  const auto cell = [&](int a, int64_t p) -> int64_t {
    if (s[a] == 0) return p / w[a];
    return p < s[a] ? -1 : (p - s[a]) / w[a];
  };
  const auto coord = [&](int64_t i) { return Dims3{i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]}; };
  const int64_t th = 2 * table_window[1] - 1, tw = 2 * table_window[2] - 1;
  std::vector<double> out(static_cast<size_t>(q.numel()), 0.0);
  const auto at = [&](const TD& t, int64_t b, int64_t ch, int64_t i) { return t.at((b * c + ch) * vox + i); };
  for (int64_t b = 0; b < n; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < vox; ++i) {
        const Dims3 pi = coord(i);
        std::vector<int64_t> keys;
        std::vector<double> logits;
        for (int64_t j = 0; j < vox; ++j) {
          const Dims3 pj = coord(j);
          bool same = true;
          for (int a = 0; a < 3; ++a) same = same && cell(a, pi[a]) == cell(a, pj[a]);
          if (!same) continue;
          double dot = 0.0;
          for (int64_t e = 0; e < hd; ++e) dot += at(q, b, h * hd + e, i) * at(k, b, h * hd + e, j);
          const int64_t idx = ((pi[0] - pj[0] + table_window[0] - 1) * th + (pi[1] - pj[1] + table_window[1] - 1)) * tw +
                              (pi[2] - pj[2] + table_window[2] - 1);
          keys.push_back(j);
          logits.push_back(dot / std::sqrt(static_cast<double>(hd)) + table.at(h * table.dim(1) + idx));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (int64_t e = 0; e < hd; ++e) {
          double acc = 0.0;
          for (size_t t = 0; t < keys.size(); ++t) acc += logits[t] / z * at(v, b, h * hd + e, keys[t]);
          out[static_cast<size_t>((b * c + h * hd + e) * vox + i)] = acc;
        }
      }
  return out;
}

struct AttentionCase {
  Dims3 dims;
  Dims3 window;
  bool shifted;
};

class WindowedAttentionOracle : public ::testing::TestWithParam<AttentionCase> {};

TEST_P(WindowedAttentionOracle, MatchesCellEnumeration) {
  const auto c = GetParam();
  std::mt19937_64 rng(7);
  const int64_t heads = 2, ch = 4;
  const Shape shape{2, ch, c.dims[0], c.dims[1], c.dims[2]};
  auto q = random_tensor(shape, rng, -2, 2, false), k = random_tensor(shape, rng, -2, 2, false),
       v = random_tensor(shape, rng, -1, 1, false);
  auto table = random_tensor({heads, relative_table_size(c.window)}, rng, -0.5, 0.5, false);
  const auto got = window_attention(q, k, v, table, heads, c.window, c.shifted);
  const auto want = windowed_attention_oracle(q, k, v, table, heads, c.window, c.shifted);
  double err = 0.0;
  for (size_t i = 0; i < want.size(); ++i) err = std::max(err, std::abs(got.at(static_cast<int64_t>(i)) - want[i]));
  EXPECT_LT(err, 1e-10);
}

INSTANTIATE_TEST_SUITE_P(
    Layouts, WindowedAttentionOracle,
    ::testing::Values(AttentionCase{{4, 4, 4}, {4, 4, 4}, false},  // one window: dense attention
                      AttentionCase{{4, 4, 4}, {5, 5, 5}, false},  // window clamped to the volume
                      AttentionCase{{6, 6, 6}, {3, 3, 3}, false}, AttentionCase{{6, 6, 6}, {3, 3, 3}, true},
                      AttentionCase{{4, 5, 7}, {3, 3, 3}, false},  // padded on every axis
                      AttentionCase{{4, 5, 7}, {3, 3, 3}, true}, AttentionCase{{8, 3, 5}, {4, 2, 3}, true},
                      AttentionCase{{2, 6, 3}, {5, 5, 5}, true}));

// Dense attention without any windowing, written independently of the cell
// bookkeeping above.
TEST(WindowedAttention, WholeVolumeWindowEqualsDenseAttention) {
  std::mt19937_64 rng(3);
  const Shape shape{1, 2, 3, 3, 3};
  auto q = random_tensor(shape, rng, -1, 1, false), k = random_tensor(shape, rng, -1, 1, false),
       v = random_tensor(shape, rng, -1, 1, false);
  auto table = TD::zeros({1, relative_table_size({3, 3, 3})});
  auto got = window_attention(q, k, v, table, 1, {3, 3, 3}, false);
  for (int64_t i = 0; i < 27; ++i) {
    std::vector<double> p(27);
    double z = 0.0;
    for (int64_t j = 0; j < 27; ++j) {
      p[j] = std::exp((q.at(i) * k.at(j) + q.at(27 + i) * k.at(27 + j)) / std::sqrt(2.0));
      z += p[j];
    }
    for (int64_t ch = 0; ch < 2; ++ch) {
      double want = 0.0;
      for (int64_t j = 0; j < 27; ++j) want += p[j] / z * v.at(ch * 27 + j);
      EXPECT_NEAR(got.at(ch * 27 + i), want, 1e-5);
    }
  }
}

TEST(WindowedAttention, PaddedKeysGetZeroWeight) {
  // A 5^3 window over a 4^3 volume next to a larger neighbour: in the 7-wide
  // axis the second window holds 2 real and 3 padded tokens. With uniform
  // logits every query must average exactly the real tokens of its window.
  const Shape shape{1, 1, 4, 4, 7};
  auto q = TD::zeros(shape), k = TD::zeros(shape);
  std::mt19937_64 rng(1);
  auto v = random_tensor(shape, rng, 1, 2, false);
  auto table = TD::zeros({1, relative_table_size({5, 5, 5})});
  auto out = window_attention(q, k, v, table, 1, {5, 5, 5}, false);
  for (int64_t x = 0; x < 7; ++x) {
    const int64_t lo = x < 5 ? 0 : 5, hi = x < 5 ? 5 : 7;
    double mean = 0.0;
    for (int64_t i = 0; i < 16; ++i)
      for (int64_t xx = lo; xx < hi; ++xx) mean += v.at(i * 7 + xx);
    mean /= 16.0 * static_cast<double>(hi - lo);
    EXPECT_NEAR(out.at(x), mean, 1e-12) << "x=" << x;
  }
}

template <typename T>
struct Built {
  ParameterSet<T> params;
  std::mt19937_64 rng{5};
  BuildContext<T> ctx{params, rng};
};

TD layer_norm_plain(const TD& x, int64_t c) {
  return channel_layer_norm(x, TD::full({c}, 1.0), TD::zeros({c}));
}

TEST(ConvBlock, ZeroInputGivesZeroOutput) {
  Built<double> b;
  ConvBlock<double> blk(b.ctx, "cb", {2, 4, 2, 0, 0, {5, 5, 5}});
  auto y = blk(TD::zeros({1, 2, 4, 4, 4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(ConvBlock, OutputShape) {
  Built<float> b;
  ConvBlock<float> blk(b.ctx, "cb", {8, 16, 2, 0, 0, {5, 5, 5}});
  NoGradGuard g;
  auto y = blk(TF::zeros({1, 8, 16, 16, 16}));
  EXPECT_EQ(y.shape(), (Shape{1, 16, 16, 16, 16}));
}

TEST(ConvBlock, ChannelMismatchNamesAxis) {
  Built<double> b;
  ConvBlock<double> blk(b.ctx, "cb", {2, 4, 1, 0, 0, {5, 5, 5}});
  try {
    blk(TD::zeros({1, 3, 4, 4, 4}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), 1);
  }
}

TEST(ConvBlock, GradientCheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    ConvBlock<double> blk(b.ctx, "cb", {2, 3, 2, 0, 0, {5, 5, 5}});
    std::mt19937_64 rng(seed + 10);
    const Shape shapes[] = {{1, 2, 6, 6, 6}, {2, 2, 3, 4, 5}, {1, 2, 5, 3, 4}, {1, 2, 4, 4, 4}, {2, 2, 3, 3, 3}};
    auto x = random_tensor(shapes[seed], rng);
    auto inputs = tensors_of(b.params);
    inputs.push_back(x);
    auto rep = gradient_check<double>([&] { return weighted_sum(blk(x)); }, inputs, block_check());
    EXPECT_TRUE(rep.pass) << "seed " << seed << " err " << rep.max_rel_err << " at " << rep.worst;
  }
}

TEST(WindowTransformer, ZeroQueryKeyGivesWindowMeanOfValues) {
  Built<double> b;
  WindowTransformerBlock<double> blk(b.ctx, "t", 4, 2, {3, 3, 3}, false, false);
  zero(blk.q().weight());
  zero(blk.q().bias());
  zero(blk.k().weight());
  std::mt19937_64 rng(2);
  auto x = random_tensor({1, 4, 6, 6, 6}, rng);
  auto a = blk.attend(x);
  auto vp = blk.v()(layer_norm_plain(x, 4));
  for (int64_t ch = 0; ch < 4; ++ch)
    for (int64_t i = 0; i < 216; ++i) {
      const int64_t z = i / 36, y = (i / 6) % 6, xx = i % 6;
      double mean = 0.0;
      for (int64_t dz = 0; dz < 3; ++dz)
        for (int64_t dy = 0; dy < 3; ++dy)
          for (int64_t dx = 0; dx < 3; ++dx)
            mean += vp.at(ch * 216 + ((z / 3 * 3 + dz) * 6 + y / 3 * 3 + dy) * 6 + xx / 3 * 3 + dx);
      EXPECT_NEAR(a.at(ch * 216 + i), mean / 27.0, 1e-12);
    }
}

// Copies every parameter of `from` into the same-suffix parameter of `to`.
void copy_matching(const ParameterSet<double>& from, const std::string& from_prefix, ParameterSet<double>& to,
                   const std::string& to_prefix) {
  for (const auto& p : from.items()) {
    const auto* dst = to.find(to_prefix + p.name.substr(from_prefix.size()));
    ASSERT_NE(dst, nullptr) << p.name;
    auto dv = Tensor<double>(dst->tensor).values();
    const auto sv = p.tensor.vec();
    std::copy(sv.begin(), sv.end(), dv.begin());
  }
}

TEST(WindowCrossAttention, SameInputsDegenerateToSelfAttention) {
  for (bool shifted : {false, true}) {
    Built<double> a, c;
    c.rng.seed(77);
    WindowTransformerBlock<double> self_blk(a.ctx, "s", 4, 2, {3, 3, 3}, shifted, false);
    WindowTransformerBlock<double> cross_blk(c.ctx, "x", 4, 2, {3, 3, 3}, shifted, true);
    copy_matching(a.params, "s", c.params, "x");
    std::mt19937_64 rng(4);
    auto x = random_tensor({1, 4, 6, 5, 4}, rng);
    EXPECT_LT(max_abs_diff(self_blk(x), cross_blk(x, &x)), 1e-12);
  }
}

TEST(WindowCrossAttention, ZeroValueProjectionRemovesOtherModality) {
  Built<double> b;
  WindowTransformerBlock<double> blk(b.ctx, "x", 4, 2, {3, 3, 3}, true, true);
  zero(blk.v().weight());
  zero(blk.v().bias());
  std::mt19937_64 rng(6);
  auto x = random_tensor({1, 4, 5, 5, 5}, rng);
  auto o1 = random_tensor({1, 4, 5, 5, 5}, rng), o2 = random_tensor({1, 4, 5, 5, 5}, rng);
  const auto attended = blk.attend(x, &o1);
  for (double v : attended.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(max_abs_diff(blk(x, &o1), blk(x, &o2)), 0.0);
}

TEST(WindowCrossAttention, GradientReachesBothModalities) {
  Built<double> b;
  WindowTransformerBlock<double> blk(b.ctx, "x", 4, 2, {3, 3, 3}, false, true);
  std::mt19937_64 rng(8);
  auto x = random_tensor({1, 4, 4, 4, 4}, rng), o = random_tensor({1, 4, 4, 4, 4}, rng);
  backward(weighted_sum(blk(x, &o)));
  const auto nonzero = [](const TD& t) {
    double s = 0.0;
    for (double g : t.grad()) s += std::abs(g);
    return s;
  };
  EXPECT_GT(nonzero(x), 1e-6);
  EXPECT_GT(nonzero(o), 1e-6);
}

TEST(WindowCrossAttention, ModalityShapeMismatchThrows) {
  Built<double> b;
  WindowTransformerBlock<double> blk(b.ctx, "x", 4, 2, {3, 3, 3}, false, true);
  auto x = TD::zeros({1, 4, 4, 4, 4}), o = TD::zeros({1, 4, 4, 4, 5});
  EXPECT_THROW(blk(x, &o), ShapeError);
}

BlockConfig hybrid_cfg(int64_t cin, int64_t cout) { return {cin, cout, 2, 2, 2, {3, 3, 3}}; }

void zero_conv_path(ConvBlock<double>& cb) {
  for (auto& l : cb.layers()) zero(l.conv().weight());
}

TEST(Hpsa, PathIsolation) {
  for (int64_t cin : {4, 2}) {
    Built<double> b;
    HpsaBlock<double> blk(b.ctx, "h", hybrid_cfg(cin, 4));
    std::mt19937_64 rng(9);
    auto x = random_tensor({1, cin, 5, 6, 4}, rng);
    auto full = blk(x);
    EXPECT_GT(max_abs_diff(full, blk.conv_path(x)), 1e-3);
    auto trans = blk.transformer_path(x);
    zero(blk.out_proj().weight());
    zero(blk.out_proj().bias());
    EXPECT_EQ(max_abs_diff(blk(x), blk.conv_path(x)), 0.0);

    Built<double> b2;
    HpsaBlock<double> blk2(b2.ctx, "h", hybrid_cfg(cin, 4));
    zero_conv_path(blk2.conv());
    EXPECT_LT(max_abs_diff(blk2(x), trans), 1e-12);
  }
}

TEST(Hpsa, StageShapes) {
  const std::vector<int64_t> ce{8, 16, 32, 64, 128};
  const std::vector<int> n_conv{2, 3, 3, 4, 4}, n_trans{0, 2, 2, 2, 2};
  const std::vector<int64_t> heads{0, 2, 4, 8, 16};
  NoGradGuard g;
  for (size_t s = 1; s < ce.size(); ++s) {
    for (int64_t cin : {ce[s], ce[s - 1]}) {
      Built<float> b;
      const int64_t side = 80 >> s;
      HpsaBlock<float> blk(b.ctx, "h", {cin, ce[s], n_conv[s], n_trans[s], heads[s], {5, 5, 5}});
      auto y = blk(TF::zeros({1, cin, side, side, side}));
      EXPECT_EQ(y.shape(), (Shape{1, ce[s], side, side, side})) << "stage " << s;
    }
  }
}

TEST(Hpsa, GradientCheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    HpsaBlock<double> blk(b.ctx, "h", hybrid_cfg(seed % 2 ? 2 : 4, 4));
    std::mt19937_64 rng(seed + 20);
    const Shape shapes[] = {{1, 4, 4, 4, 4}, {1, 2, 3, 5, 4}, {1, 4, 5, 4, 3}, {1, 2, 6, 3, 3}, {2, 4, 3, 3, 4}};
    auto x = random_tensor(shapes[seed], rng);
    auto inputs = tensors_of(b.params);
    inputs.push_back(x);
    auto rep = gradient_check<double>([&] { return weighted_sum(blk(x)); }, inputs, block_check());
    EXPECT_TRUE(rep.pass) << "seed " << seed << " err " << rep.max_rel_err << " at " << rep.worst;
  }
}

TEST(Hpca, ZeroOtherContributionReducesToSelfPath) {
  Built<double> b;
  HpcaBlock<double> blk(b.ctx, "c", hybrid_cfg(4, 4));
  for (auto& t : blk.blocks()) {
    zero(t.v().weight());
    zero(t.v().bias());
  }
  std::mt19937_64 rng(10);
  auto x = random_tensor({1, 4, 4, 5, 4}, rng), o1 = random_tensor({1, 4, 4, 5, 4}, rng),
       o2 = random_tensor({1, 4, 4, 5, 4}, rng);
  EXPECT_EQ(max_abs_diff(blk(x, o1), blk(x, o2)), 0.0);
}

TEST(Hpca, DirectionSpecific) {
  Built<double> b;
  HpcaBlock<double> blk(b.ctx, "c", hybrid_cfg(4, 4));
  std::mt19937_64 rng(11);
  auto x = random_tensor({1, 4, 4, 4, 4}, rng), o = random_tensor({1, 4, 4, 4, 4}, rng);
  EXPECT_GT(max_abs_diff(blk(x, o), blk(o, x)), 1e-3);
}

TEST(Hpca, PathIsolation) {
  Built<double> b;
  HpcaBlock<double> blk(b.ctx, "c", hybrid_cfg(2, 4));
  std::mt19937_64 rng(12);
  auto x = random_tensor({1, 2, 4, 4, 3}, rng), o = random_tensor({1, 2, 4, 4, 3}, rng);
  auto trans = blk.transformer_path(x, o);
  zero(blk.out_proj().weight());
  zero(blk.out_proj().bias());
  EXPECT_EQ(max_abs_diff(blk(x, o), blk.conv()(x)), 0.0);
  Built<double> b2;
  HpcaBlock<double> blk2(b2.ctx, "c", hybrid_cfg(2, 4));
  zero_conv_path(blk2.conv());
  EXPECT_LT(max_abs_diff(blk2(x, o), trans), 1e-12);
}

TEST(Hpca, GradientCheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    const int64_t cin = seed % 2 ? 2 : 4;
    HpcaBlock<double> blk(b.ctx, "c", hybrid_cfg(cin, 4));
    std::mt19937_64 rng(seed + 30);
    const Dims3 sp[] = {{6, 6, 6}, {3, 5, 4}, {5, 4, 3}, {4, 3, 3}, {3, 3, 4}};
    const Shape shape{1, cin, sp[seed][0], sp[seed][1], sp[seed][2]};
    auto x = random_tensor(shape, rng), o = random_tensor(shape, rng);
    auto inputs = tensors_of(b.params);
    inputs.push_back(x);
    inputs.push_back(o);
    GradCheckOptions opt = block_check();
    // The 6^3 case has ~9k parameters; sample them, but check both inputs fully.
    if (seed == 0) opt.max_elements = 400;
    auto rep = gradient_check<double>([&] { return weighted_sum(blk(x, o)); }, inputs, opt);
    EXPECT_TRUE(rep.pass) << "seed " << seed << " err " << rep.max_rel_err << " at " << rep.worst;
  }
}

TEST(Rag, ZeroPsiGivesUniformThirds) {
  Built<double> b;
  RagBlock<double> rag(b.ctx, "r", 4, 6, 6, 4);
  for (auto* p : rag.psi()) {
    zero(p->weight());
    zero(p->bias());
  }
  std::mt19937_64 rng(13);
  auto xs = random_tensor({1, 4, 6, 6, 6}, rng);
  auto out = rag(xs, random_tensor({1, 6, 3, 3, 3}, rng), random_tensor({1, 6, 3, 3, 3}, rng));
  for (auto* a : {&out.alpha_pt, &out.alpha_mln, &out.alpha_bg})
    for (double v : a->values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  for (int64_t i = 0; i < xs.numel(); ++i) EXPECT_NEAR(out.x_pt.at(i), xs.at(i) / 3.0, 1e-15);
}

TEST(Rag, AlphasPartitionUnityAndGateSkip) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    RagBlock<double> rag(b.ctx, "r", 3, 5, 2, 4);
    std::mt19937_64 rng(seed);
    const bool half = seed % 2 == 0;
    auto xs = random_tensor({2, 3, 6, 4, 5}, rng, -5, 5);
    const Shape gs = half ? Shape{2, 5, 3, 2, 3} : Shape{2, 5, 6, 4, 5};
    const Shape gm = half ? Shape{2, 2, 3, 2, 3} : Shape{2, 2, 6, 4, 5};
    auto out = rag(xs, random_tensor(gs, rng, -5, 5), random_tensor(gm, rng, -5, 5));
    ASSERT_EQ(out.alpha_pt.shape(), (Shape{2, 1, 6, 4, 5}));
    for (int64_t i = 0; i < out.alpha_pt.numel(); ++i) {
      const double a = out.alpha_pt.at(i), m = out.alpha_mln.at(i), g = out.alpha_bg.at(i);
      EXPECT_NEAR(a + m + g, 1.0, 1e-5);
      EXPECT_GE(std::min({a, m, g}), 0.0);
      EXPECT_LE(std::max({a, m, g}), 1.0);
    }
    const int64_t vox = 6 * 4 * 5;
    for (int64_t i = 0; i < xs.numel(); ++i) {
      const int64_t bi = i / (3 * vox), p = i % vox;
      EXPECT_DOUBLE_EQ(out.x_pt.at(i), xs.at(i) * out.alpha_pt.at(bi * vox + p));
      EXPECT_DOUBLE_EQ(out.x_mln.at(i), xs.at(i) * out.alpha_mln.at(bi * vox + p));
    }
  }
}

TEST(Rag, RejectsGateOfWrongResolution) {
  Built<double> b;
  RagBlock<double> rag(b.ctx, "r", 2, 2, 2, 2);
  EXPECT_THROW(rag(TD::zeros({1, 2, 8, 8, 8}), TD::zeros({1, 2, 3, 4, 4}), TD::zeros({1, 2, 4, 4, 4})),
               ShapeError);
}

TEST(Rag, GradientCheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    RagBlock<double> rag(b.ctx, "r", 3, 4, 2, 3);
    std::mt19937_64 rng(seed + 40);
    const Dims3 sp[] = {{6, 6, 6}, {4, 4, 4}, {5, 3, 4}, {4, 6, 2}, {3, 3, 3}};
    const Dims3 s = sp[seed];
    const bool half = seed % 2 == 0;
    const auto g = [&](int64_t a) { return half ? (s[a] + 1) / 2 : s[a]; };
    auto xs = random_tensor({1, 3, s[0], s[1], s[2]}, rng);
    auto gp = random_tensor({1, 4, g(0), g(1), g(2)}, rng), gm = random_tensor({1, 2, g(0), g(1), g(2)}, rng);
    auto inputs = tensors_of(b.params);
    inputs.insert(inputs.end(), {xs, gp, gm});
    auto rep = gradient_check<double>(
        [&] {
          auto o = rag(xs, gp, gm);
          return add(add(weighted_sum(o.x_pt, 1), weighted_sum(o.x_mln, 2)), weighted_sum(o.alpha_bg, 3));
        },
        inputs, block_check());
    EXPECT_TRUE(rep.pass) << "seed " << seed << " err " << rep.max_rel_err << " at " << rep.worst;
  }
}

TEST(VanillaGate, SigmoidGatesSkip) {
  Built<double> b;
  VanillaAttentionGate<double> ag(b.ctx, "a", 3, 4, 2);
  std::mt19937_64 rng(14);
  auto xs = random_tensor({1, 3, 4, 4, 4}, rng);
  auto [alpha, gated] = ag(xs, random_tensor({1, 4, 2, 2, 2}, rng));
  for (double a : alpha.values()) {
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
  }
  for (int64_t i = 0; i < xs.numel(); ++i) EXPECT_DOUBLE_EQ(gated.at(i), xs.at(i) * alpha.at(i % 64));
}

TEST(VanillaGate, GradientCheck) {
  Built<double> b;
  VanillaAttentionGate<double> ag(b.ctx, "a", 3, 4, 2);
  std::mt19937_64 rng(15);
  auto xs = random_tensor({1, 3, 4, 4, 4}, rng), g = random_tensor({1, 4, 2, 2, 2}, rng);
  auto inputs = tensors_of(b.params);
  inputs.insert(inputs.end(), {xs, g});
  auto rep = gradient_check<double>([&] { return weighted_sum(ag(xs, g).second); }, inputs, block_check());
  EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(SegmentationHead, ZeroWeightsGiveHalf) {
  Built<double> b;
  SegmentationHead<double> head(b.ctx, "seg", 4);
  zero(head.conv().weight());
  std::mt19937_64 rng(16);
  const auto y = head(random_tensor({1, 4, 3, 3, 3}, rng));
  for (double v : y.values()) EXPECT_EQ(v, 0.5);
}

TEST(SegmentationHead, OpenUnitIntervalAndGradient) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    SegmentationHead<double> head(b.ctx, "seg", 4);
    std::mt19937_64 rng(seed);
    auto x = random_tensor({1, 4, 3 + static_cast<int64_t>(seed), 3, 4}, rng, -3, 3);
    const auto y = head(x);
    for (double v : y.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    auto inputs = tensors_of(b.params);
    inputs.push_back(x);
    auto rep = gradient_check<double>([&] { return weighted_sum(head(x)); }, inputs, block_check());
    EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  }
}

TEST(SurvivalHead, TenProbabilities) {
  Built<double> b;
  SurvivalHead<double> head(b.ctx, "surv", 12, 64, 10, 0.3);
  std::mt19937_64 rng(17);
  auto s = head(random_tensor({3, 12}, rng, -3, 3), false, nullptr);
  ASSERT_EQ(s.shape(), (Shape{3, 10}));
  for (double v : s.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (const char* n : {"surv.fc1.weight", "surv.fc2.weight"}) EXPECT_TRUE(b.params.find(n)->weight_decay);
}

TEST(SurvivalHead, ZeroFinalLayerGivesHalf) {
  Built<double> b;
  SurvivalHead<double> head(b.ctx, "surv", 6, 64, 10, 0.3);
  zero(head.fc2_weight());
  zero(head.fc2_bias());
  std::mt19937_64 rng(18);
  const auto s = head(random_tensor({2, 6}, rng), true, &rng);
  for (double v : s.values()) EXPECT_EQ(v, 0.5);
}

TEST(SurvivalHead, LengthMismatchThrows) {
  Built<double> b;
  SurvivalHead<double> head(b.ctx, "surv", 6, 64, 10, 0.3);
  EXPECT_THROW(head(TD::zeros({1, 5}), false, nullptr), ShapeError);
}

TEST(SurvivalHead, GradientCheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Built<double> b;
    b.rng.seed(seed);
    SurvivalHead<double> head(b.ctx, "surv", 4 + static_cast<int64_t>(seed), 8, 10, 0.3);
    std::mt19937_64 rng(seed + 50);
    auto x = random_tensor({2, 4 + static_cast<int64_t>(seed)}, rng);
    auto inputs = tensors_of(b.params);
    inputs.push_back(x);
    auto rep = gradient_check<double>([&] { return weighted_sum(head(x, false, nullptr)); }, inputs, block_check());
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
  }
}

TEST(BlockConfig, Validation) {
  EXPECT_THROW((BlockConfig{4, 6, 2, 2, 4, {3, 3, 3}}.validate()), Error);  // 6 % 4
  EXPECT_THROW((BlockConfig{4, 4, 2, 3, 2, {3, 3, 3}}.validate()), Error);  // odd n_trans
  EXPECT_THROW((BlockConfig{4, 4, 2, 0, 2, {3, 3, 3}}.validate()), Error);
  EXPECT_NO_THROW((BlockConfig{4, 4, 2, 2, 2, {3, 3, 3}}.validate()));
}

}  // namespace
}  // namespace xsurv
