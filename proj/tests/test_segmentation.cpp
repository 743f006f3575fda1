#include <gtest/gtest.h>

#include <cmath>

#include "xsurv/model.hpp"
#include "xsurv/segmentation.hpp"
#include "xsurv/survival.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace xsurv {
namespace {

using namespace xsurv::testing;

TD binary_tensor(Shape shape, std::mt19937_64& rng, double p = 0.3) {
  std::bernoulli_distribution b(p);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return TD::from(std::move(shape), std::move(v));
}

std::vector<double> flat(const TD& t) { return {t.values().begin(), t.values().end()}; }

double dice_oracle(const TD& p, const TD& g, double smooth) { return oracle::dice(flat(p), flat(g), smooth); }

double focal_oracle(const TD& p, const TD& g, double alpha, double gamma, bool standard) {
  return oracle::focal(flat(p), flat(g), alpha, gamma, standard);
}

TEST(Dice, PerfectAndDisjoint) {
  std::mt19937_64 rng(1);
  auto g = binary_tensor({1, 1, 4, 4, 4}, rng);
  EXPECT_NEAR(dice_loss(g, g, 1e-5).item(), 0.0, 1e-15);
  auto inv = one_minus(g);
  EXPECT_NEAR(dice_loss(inv, g, 1e-5).item(), 1.0, 1e-6);
}

TEST(Dice, MatchesDirectSum) {
  std::mt19937_64 rng(2);
  for (int c = 0; c < 100; ++c) {
    auto p = random_tensor({1, 1, 4, 4, 4}, rng, 0, 1, false);
    auto g = binary_tensor({1, 1, 4, 4, 4}, rng, 0.1 + 0.008 * c);
    const double got = dice_loss(p, g, 1e-5).item();
    EXPECT_NEAR(got, dice_oracle(p, g, 1e-5), 1e-6);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(Dice, BatchIsPerSampleMean) {
  std::mt19937_64 rng(3);
  auto p0 = random_tensor({1, 1, 3, 3, 3}, rng, 0, 1, false), p1 = random_tensor({1, 1, 3, 3, 3}, rng, 0, 1, false);
  auto g0 = binary_tensor({1, 1, 3, 3, 3}, rng), g1 = binary_tensor({1, 1, 3, 3, 3}, rng);
  const double got = dice_loss(concat<double>({p0, p1}, 0), concat<double>({g0, g1}, 0)).item();
  EXPECT_NEAR(got, 0.5 * (dice_oracle(p0, g0, 1e-5) + dice_oracle(p1, g1, 1e-5)), 1e-12);
}

TEST(Dice, DecreasesAsVoxelMovesTowardTruth) {
  std::mt19937_64 rng(4);
  auto g = binary_tensor({1, 1, 4, 4, 4}, rng, 0.5);
  auto p = random_tensor({1, 1, 4, 4, 4}, rng, 0.2, 0.8, false);
  const double base = dice_loss(p, g).item();
  for (int64_t i = 0; i < p.numel(); ++i) {
    auto q = TD::from(p.shape(), p.vec());
    q.values()[i] += (g.at(i) == 1.0 ? 0.1 : -0.1);
    EXPECT_LT(dice_loss(q, g).item(), base) << i;
  }
}

TEST(Focal, PerfectPredictionNearZero) {
  std::mt19937_64 rng(5);
  auto g = binary_tensor({1, 1, 4, 4, 4}, rng);
  EXPECT_LT(focal_loss(g, g).item(), 1e-12);
}

TEST(Focal, ReducesToWeightedCrossEntropy) {
  std::mt19937_64 rng(6);
  auto p = random_tensor({1, 1, 4, 4, 4}, rng, 0.01, 0.99, false);
  auto g = binary_tensor({1, 1, 4, 4, 4}, rng);
  double bce = 0.0, pos_weighted = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double a = g.at(i) * std::log(p.at(i)), b = (1 - g.at(i)) * std::log(1 - p.at(i));
    bce -= a + b;
    pos_weighted -= 0.5 * a + b;
  }
  bce /= 64.0;
  pos_weighted /= 64.0;
  FocalParams fp{0.5, 0.0, true};
  EXPECT_NEAR(focal_loss(p, g, fp).item(), 0.5 * bce, 1e-6);
  fp.standard_alpha = false;  // as printed: alpha only on the positive term
  EXPECT_NEAR(focal_loss(p, g, fp).item(), pos_weighted, 1e-6);
}

TEST(Focal, MatchesTermByTerm) {
  std::mt19937_64 rng(7);
  for (int c = 0; c < 100; ++c) {
    auto p = random_tensor({1, 1, 4, 4, 4}, rng, 0, 1, false);
    if (c % 10 == 0) p.values()[0] = 0.0;  // clamp path
    auto g = binary_tensor({1, 1, 4, 4, 4}, rng);
    const bool standard = c % 2;
    const double gamma = (c % 3) * 1.0;
    FocalParams fp{0.25, gamma, standard};
    const double got = focal_loss(p, g, fp).item();
    EXPECT_NEAR(got, focal_oracle(p, g, 0.25, gamma, standard), 1e-6);
    EXPECT_GE(got, 0.0);
  }
}

TEST(SegLosses, GradientCheck) {
  std::mt19937_64 rng(8);
  for (int c = 0; c < 5; ++c) {
    auto p = random_tensor({1 + c % 2, 1, 3, 3, 2 + c}, rng, 0.05, 0.95);
    auto g = binary_tensor(p.shape(), rng);
    auto rep = gradient_check<double>([&] { return segmentation_loss(p, g); }, {p}, strict());
    EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  }
}

TEST(Dsc, Examples) {
  std::vector<float> a{1, 1, 0, 0}, b{0, 0, 1, 1}, h{1, 0, 1, 0}, z{0, 0, 0, 0};
  const auto dsc = [](const std::vector<float>& x, const std::vector<float>& y) { return dsc_metric<float, float>(x, y); };
  EXPECT_EQ(dsc(a, a), 1.0);
  EXPECT_EQ(dsc(a, b), 0.0);
  EXPECT_EQ(dsc(a, h), 0.5);
  EXPECT_EQ(dsc(z, z), 1.0);
  EXPECT_EQ(dsc(h, a), dsc(a, h));
  std::vector<float> short_mask{1, 0};
  EXPECT_THROW(dsc(a, short_mask), ShapeError);
}

TEST(CombinedLoss, ReducesToSurvivalTerm) {
  auto surv = TD::scalar(0.7), pt = TD::scalar(0.3), mln = TD::scalar(0.2);
  EXPECT_EQ(combined_loss(surv, pt, mln, 0.0).item(), 0.7);
  EXPECT_EQ(combined_loss(surv, TD::scalar(0.0), TD::scalar(0.0), 1.0).item(), 0.7);
  EXPECT_DOUBLE_EQ(combined_loss(surv, pt, mln, 1.0).item(), 1.2);
  EXPECT_THROW(combined_loss(TD::scalar(NAN), pt, mln), Error);
}

// d(L_surv + L_pt + L_mln)/d(theta) == sum of the per-term gradients, and both
// agree with central differences for one shared encoder weight.
TEST(CombinedLoss, GradientIsSumOfTermGradients) {
  XSurvModel<double> m(tiny_config(), 21);
  std::mt19937_64 rng(21);
  auto pet = random_tensor({2, 1, 16, 16, 16}, rng, -1, 1, false);
  auto ct = random_tensor({2, 1, 16, 16, 16}, rng, -1, 1, false);
  auto gpt = binary_tensor({2, 1, 16, 16, 16}, rng, 0.1), gmln = binary_tensor({2, 1, 16, 16, 16}, rng, 0.05);
  IntervalScheme s{{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10}};
  std::vector<SurvivalLabels> labels{make_labels({3.5, false}, s), make_labels({7.2, true}, s)};
  const auto terms = [&](int which) {
    auto o = m.forward(pet, ct, false, nullptr);
    auto ls = survival_loss(o.s_pred, labels);
    auto lp = segmentation_loss(o.pt_prob, gpt), lm = segmentation_loss(o.mln_prob, gmln);
    switch (which) {
      case 0: return ls;
      case 1: return lp;
      case 2: return lm;
      default: return combined_loss(ls, lp, lm, 1.0);
    }
  };
  auto w = m.params().find("enc.pet.s0.stem.conv.weight")->tensor;
  std::vector<double> sum_terms(w.vec().size(), 0.0);
  for (int t = 0; t < 3; ++t) {
    m.params().zero_grad();
    backward(terms(t));
    for (size_t i = 0; i < sum_terms.size(); ++i) sum_terms[i] += w.grad()[i];
  }
  m.params().zero_grad();
  backward(terms(3));
  const auto combined = std::vector<double>(w.grad().begin(), w.grad().end());
  for (size_t i = 0; i < combined.size(); ++i)
    EXPECT_NEAR(combined[i], sum_terms[i], 1e-6 * std::max(1.0, std::abs(combined[i])));
  // Small step: the 16^3 volume has leaky-ReLU inputs close to zero.
  const double h = 1e-7;
  NoGradGuard g;
  for (int i : {0, 5, 11}) {
    const double saved = w.at(i);
    w.values()[i] = saved + h;
    const double fp = terms(3).item();
    w.values()[i] = saved - h;
    const double fm = terms(3).item();
    w.values()[i] = saved;
    EXPECT_NEAR((fp - fm) / (2 * h), combined[i], 1e-6 * std::max(1.0, std::abs(combined[i]))) << i;
  }
}

}  // namespace
}  // namespace xsurv
