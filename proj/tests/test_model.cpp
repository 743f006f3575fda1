#include <gtest/gtest.h>

#include <cmath>

#include "xsurv/model.hpp"
#include "test_support.hpp"

namespace xsurv {
namespace {

using namespace xsurv::testing;

template <typename T>
Tensor<T> objective(const ForwardOutput<T>& o) {
  Tensor<T> loss = weighted_sum(o.s_pred, 1);
  if (o.pt_prob) loss = add(loss, weighted_sum(o.pt_prob, 2));
  if (o.mln_prob) loss = add(loss, weighted_sum(o.mln_prob, 3));
  return loss;
}

std::vector<Ablation> all_modes() {
  std::vector<Ablation> m;
  for (const auto& [a, _] : ablation_names()) m.push_back(a);
  return m;
}

TEST(ModelConfig, DefaultsAreValid) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.C_e, (std::vector<int64_t>{8, 16, 32, 64, 128}));
  EXPECT_EQ(c.N_intervals, 10);
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(ModelConfig, Invariants) {
  auto c = tiny_config();
  c.N_cross = 1;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.heads[2] = 0;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.C_d.pop_back();
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.ablation = Ablation::kEarlyFusion;  // cross stages without a second branch
  EXPECT_THROW(c.validate(), Error);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  for (auto mode : all_modes()) {
    auto c = ablation_config(tiny_config(), mode);
    EXPECT_EQ(ModelConfig::from_json(Json::parse(c.to_json().dump())), c) << to_string(mode);
  }
  auto j = tiny_config().to_json();
  j["windw"] = 3;
  EXPECT_THROW(ModelConfig::from_json(j), Error);
}

TEST(ModelConfig, AblationPresets) {
  const auto early = ablation_config(ModelConfig{}, Ablation::kEarlyFusion);
  EXPECT_EQ(early.C_e, (std::vector<int64_t>{16, 32, 64, 128, 256}));
  EXPECT_EQ(early.N_cross, 0);
  EXPECT_EQ(early.N_self, 4);
  const auto single = ablation_config(ModelConfig{}, Ablation::kSingleBranchJoint);
  EXPECT_EQ(single.C_d, (std::vector<int64_t>{256, 128, 64, 32, 16}));
  EXPECT_EQ(ablation_config(ModelConfig{}, Ablation::kLateFusion).stage_kind(4), StageKind::kSelf);
}

TEST(Model, DefaultConfigShapes) {
  XSurvModel<float> m(ModelConfig{}, 0);
  NoGradGuard g;
  auto pet = TF::zeros({1, 1, 80, 80, 80}), ct = TF::zeros({1, 1, 80, 80, 80});
  auto o = m.forward(pet, ct, false, nullptr);
  EXPECT_EQ(o.pt_prob.shape(), (Shape{1, 1, 80, 80, 80}));
  EXPECT_EQ(o.mln_prob.shape(), (Shape{1, 1, 80, 80, 80}));
  EXPECT_EQ(o.s_pred.shape(), (Shape{1, 10}));
  EXPECT_EQ(o.deep_features.dim(1), 2 * (64 + 32 + 16 + 8));
  ASSERT_EQ(o.attention_maps.size(), 5u);
  EXPECT_EQ(o.attention_maps.back().alpha_pt.shape(), (Shape{1, 1, 80, 80, 80}));
}

TEST(Model, DeterministicBuildAndForward) {
  XSurvModel<float> a(tiny_config(), 42), b(tiny_config(), 42);
  EXPECT_EQ(a.params().scalar_count(), b.params().scalar_count());
  std::mt19937_64 rng(1);
  auto pet = random_tensor<float>({1, 1, 16, 16, 16}, rng, -1, 1, false);
  auto ct = random_tensor<float>({1, 1, 16, 16, 16}, rng, -1, 1, false);
  NoGradGuard g;
  auto oa = a.forward(pet, ct, false, nullptr), ob = b.forward(pet, ct, false, nullptr);
  auto oa2 = a.forward(pet, ct, false, nullptr);
  for (auto* p : {&oa, &oa2}) {
    EXPECT_EQ(p->pt_prob.vec(), ob.pt_prob.vec());
    EXPECT_EQ(p->mln_prob.vec(), ob.mln_prob.vec());
    EXPECT_EQ(p->s_pred.vec(), ob.s_pred.vec());
  }
}

TEST(Model, EveryParameterReceivesGradientInEveryMode) {
  for (auto mode : all_modes()) {
    XSurvModel<double> m(ablation_config(tiny_config(), mode), 3);
    std::mt19937_64 rng(5);
    auto pet = random_tensor({2, 1, 16, 16, 16}, rng, -1, 1, false);
    auto ct = random_tensor({2, 1, 16, 16, 16}, rng, -1, 1, false);
    auto o = m.forward(pet, ct, true, &rng);
    backward(objective(o));
    for (const auto& p : m.params().items()) {
      double g = 0.0;
      if (p.tensor.has_grad())
        for (double v : p.tensor.grad()) g += std::abs(v);
      EXPECT_GT(g, 0.0) << to_string(mode) << " " << p.name;
    }
  }
}

TEST(Model, TinyConfigBackwardOn32Cube) {
  XSurvModel<float> m(tiny_config(), 0);
  std::mt19937_64 rng(6);
  auto pet = random_tensor<float>({1, 1, 32, 32, 32}, rng, -1, 1, false);
  auto ct = random_tensor<float>({1, 1, 32, 32, 32}, rng, -1, 1, false);
  auto o = m.forward(pet, ct, true, &rng);
  backward(objective(o));
  int64_t reached = 0;
  for (const auto& p : m.params().items()) {
    bool any = false;
    for (float v : p.tensor.grad()) any = any || v != 0.0f;
    reached += any;
  }
  EXPECT_EQ(reached, static_cast<int64_t>(m.params().size()));
}

TEST(Model, ShapeRoundTripForOddSizes) {
  for (auto mode : all_modes()) {
    XSurvModel<float> m(ablation_config(tiny_config(), mode), 0);
    NoGradGuard g;
    auto pet = TF::zeros({1, 1, 13, 10, 9}), ct = TF::zeros({1, 1, 13, 10, 9});
    auto o = m.forward(pet, ct, false, nullptr);
    for (const auto* t : {&o.pt_prob, &o.mln_prob})
      if (*t) EXPECT_EQ(t->shape(), (Shape{1, 1, 13, 10, 9})) << to_string(mode);
    EXPECT_EQ(o.s_pred.shape(), (Shape{1, 10}));
    EXPECT_EQ(o.deep_features.dim(1), m.deep_feature_size());
    if (!o.attention_maps.empty())
      EXPECT_EQ(spatial_dims(o.attention_maps.back().alpha_pt.shape()), (Dims3{13, 10, 9}));
  }
}

TEST(Model, AttentionMapsSumToOneAtEveryScale) {
  XSurvModel<double> m(tiny_config(), 8);
  std::mt19937_64 rng(8);
  auto pet = random_tensor({1, 1, 12, 12, 12}, rng, -3, 3, false);
  auto ct = random_tensor({1, 1, 12, 12, 12}, rng, -3, 3, false);
  NoGradGuard g;
  auto o = m.forward(pet, ct, false, nullptr);
  ASSERT_EQ(o.attention_maps.size(), 4u);
  for (const auto& a : o.attention_maps)
    for (int64_t i = 0; i < a.alpha_pt.numel(); ++i)
      EXPECT_NEAR(a.alpha_pt.at(i) + a.alpha_mln.at(i) + a.alpha_bg.at(i), 1.0, 1e-5);
}

TEST(Model, BatchPermutationPermutesOutputs) {
  XSurvModel<double> m(tiny_config(), 9);
  std::mt19937_64 rng(9);
  auto p0 = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false), p1 = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false);
  auto c0 = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false), c1 = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false);
  NoGradGuard g;
  auto a = m.forward(concat<double>({p0, p1}, 0), concat<double>({c0, c1}, 0), false, nullptr);
  auto b = m.forward(concat<double>({p1, p0}, 0), concat<double>({c1, c0}, 0), false, nullptr);
  EXPECT_LT(max_abs_diff(slice(a.s_pred, 0, 0, 1), slice(b.s_pred, 0, 1, 1)), 1e-12);
  EXPECT_LT(max_abs_diff(slice(a.s_pred, 0, 1, 1), slice(b.s_pred, 0, 0, 1)), 1e-12);
  EXPECT_LT(max_abs_diff(slice(a.pt_prob, 0, 0, 1), slice(b.pt_prob, 0, 1, 1)), 1e-12);
  EXPECT_LT(max_abs_diff(slice(a.mln_prob, 0, 1, 1), slice(b.mln_prob, 0, 0, 1)), 1e-12);
}

TEST(Model, PetOnlyIgnoresCt) {
  XSurvModel<double> m(ablation_config(tiny_config(), Ablation::kPetOnly), 10);
  std::mt19937_64 rng(10);
  auto pet = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false);
  auto ct1 = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false), ct2 = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false);
  NoGradGuard g;
  auto a = m.forward(pet, ct1, false, nullptr), b = m.forward(pet, ct2, false, nullptr);
  EXPECT_EQ(a.s_pred.vec(), b.s_pred.vec());
  EXPECT_EQ(a.pt_prob.vec(), b.pt_prob.vec());
  EXPECT_EQ(a.mln_prob.vec(), b.mln_prob.vec());
}

// Gradient mass reaching the CT input from the PET branch's deepest encoder
// feature. 16^3 keeps the deepest grid at 2^3: instance norm over a single
// voxel would cut every gradient.
double ct_gradient_into_pet_branch(Ablation mode) {
  XSurvModel<double> m(ablation_config(tiny_config(), mode), 11);
  std::mt19937_64 rng(11);
  auto pet = random_tensor({1, 1, 16, 16, 16}, rng);
  auto ct = random_tensor({1, 1, 16, 16, 16}, rng);
  auto o = m.forward(pet, ct, false, nullptr);
  const size_t S = m.config().stages();
  backward(weighted_sum(o.encoder_outputs[(S - 1) * 2 + 0]));
  double pet_g = 0.0, ct_g = 0.0;
  for (double v : pet.grad()) pet_g += std::abs(v);
  if (ct.has_grad())
    for (double v : ct.grad()) ct_g += std::abs(v);
  EXPECT_GT(pet_g, 0.0);
  return ct_g;
}

TEST(Model, LateFusionBranchesAreIndependent) {
  EXPECT_EQ(ct_gradient_into_pet_branch(Ablation::kLateFusion), 0.0);
  EXPECT_GT(ct_gradient_into_pet_branch(Ablation::kFull), 0.0);
}

TEST(Model, GateParameterCountsAreOrdered) {
  const auto count = [](Ablation a) {
    return XSurvModel<float>(ablation_config(ModelConfig{}, a), 0).params().scalar_count();
  };
  const auto none = count(Ablation::kDualNoAg), vanilla = count(Ablation::kDualVanillaAg), rag = count(Ablation::kFull);
  EXPECT_LT(none, vanilla);
  EXPECT_LT(vanilla, rag);
}

TEST(Model, SingleBranchOutputs) {
  NoGradGuard g;
  auto pet = TF::zeros({1, 1, 8, 8, 8}), ct = TF::zeros({1, 1, 8, 8, 8});
  {
    XSurvModel<float> m(ablation_config(tiny_config(), Ablation::kSingleBranchPt), 0);
    auto o = m.forward(pet, ct, false, nullptr);
    EXPECT_TRUE(o.pt_prob);
    EXPECT_FALSE(o.mln_prob);
    EXPECT_TRUE(o.attention_maps.empty());
  }
  {
    XSurvModel<float> m(ablation_config(tiny_config(), Ablation::kSingleBranchJoint), 0);
    auto o = m.forward(pet, ct, false, nullptr);
    EXPECT_TRUE(o.pt_prob && o.mln_prob);
  }
}

TEST(Model, ModalityShapeMismatch) {
  XSurvModel<float> m(tiny_config(), 0);
  EXPECT_THROW(m.forward(TF::zeros({1, 1, 8, 8, 8}), TF::zeros({1, 1, 8, 8, 9}), false, nullptr), ShapeError);
  EXPECT_THROW(m.forward(TF::zeros({1, 1, 8, 8, 8}), TF(), false, nullptr), Error);
}

TEST(Model, DropoutOnlyInTrainMode) {
  XSurvModel<float> m(tiny_config(), 12);
  std::mt19937_64 rng(12);
  auto pet = random_tensor<float>({1, 1, 8, 8, 8}, rng, -1, 1, false);
  auto ct = random_tensor<float>({1, 1, 8, 8, 8}, rng, -1, 1, false);
  NoGradGuard g;
  auto e = m.forward(pet, ct, false, nullptr);
  std::mt19937_64 r1(1), r2(2);
  auto t1 = m.forward(pet, ct, true, &r1), t2 = m.forward(pet, ct, true, &r2);
  EXPECT_NE(t1.s_pred.vec(), t2.s_pred.vec());
  EXPECT_EQ(t1.pt_prob.vec(), e.pt_prob.vec());
}

}  // namespace
}  // namespace xsurv
