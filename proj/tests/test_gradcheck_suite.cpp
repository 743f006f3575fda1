#include <gtest/gtest.h>

#include "xsurv/gradcheck_suite.hpp"

using namespace xsurv;
using namespace xsurv::gradsuite;

namespace {

void expect_all_pass(const std::vector<Entry>& es, double tol) {
  ASSERT_FALSE(es.empty());
  for (const auto& e : es) {
    EXPECT_TRUE(e.rep.pass) << e.name << " err " << e.rep.max_rel_err << " at " << e.rep.worst;
    EXPECT_LE(e.rep.max_rel_err, tol) << e.name;
    EXPECT_GT(e.rep.checked, 0) << e.name;
  }
}

}  // namespace

class OpSuite : public ::testing::TestWithParam<int> {};

TEST_P(OpSuite, AllOpsPass) { expect_all_pass(op_suite(GetParam()), 1e-4); }

INSTANTIATE_TEST_SUITE_P(Shapes, OpSuite, ::testing::Range(0, 5));

class BlockSuite : public ::testing::TestWithParam<int> {};

TEST_P(BlockSuite, AllBlocksPass) {
  const auto es = block_suite(GetParam());
  expect_all_pass(es, 1e-4);
  for (const char* name : {"conv_block", "window_self_attention", "window_cross_attention_shifted", "hpsa", "hpca", "rag",
                           "segmentation_head", "survival_head"})
    EXPECT_TRUE(std::any_of(es.begin(), es.end(), [&](const Entry& e) { return e.name == name; })) << name;
}

INSTANTIATE_TEST_SUITE_P(Shapes, BlockSuite, ::testing::Range(0, 5));

TEST(ModelSuite, TinyModelsPassIn64Bit) {
  const auto es = model_suite();
  EXPECT_EQ(es.size(), 4u);
  expect_all_pass(es, 1e-4);
}

TEST(ModelSuite, SinglePrecisionTinyModel) {
  const auto es = model_suite_f32(tiny_config(), 8, 1);
  EXPECT_EQ(es.size(), XSurvModel<float>(tiny_config(), 5).params().items().size());
  expect_all_pass(es, 1e-2);
}

TEST(NegativeControl, CorruptedBackwardFails) {
  const auto e = corrupted_op();
  EXPECT_FALSE(e.rep.pass);
  EXPECT_GT(e.rep.max_rel_err, 0.1);
}

TEST(ParamGroup, Names) {
  EXPECT_EQ(param_group("enc.pet.s2.hpsa.trans0.q.weight"), "enc.pet.s2");
  EXPECT_EQ(param_group("skip.s3.weight"), "skip.s3");
  EXPECT_EQ(param_group("head.surv.fc1.bias"), "head.surv.fc1");
  EXPECT_EQ(param_group("bias"), "bias");
}
