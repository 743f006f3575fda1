#include <gtest/gtest.h>

#include <cstdlib>

#include "xsurv/parallel.hpp"
#include "xsurv/pipeline.hpp"
#include "xsurv/run_config.hpp"

using namespace xsurv;

TEST(ParallelFor, VisitsEveryIndexOnce) {
  for (int workers : {1, 2, 5}) {
    std::vector<std::atomic<int>> hits(97);
    parallel_for(97, [&](int64_t i) { ++hits[static_cast<size_t>(i)]; }, workers);
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
  parallel_for(0, [](int64_t) { FAIL(); }, 4);
}

TEST(ParallelFor, RethrowsFirstError) {
  EXPECT_THROW(parallel_for(
                   20, [](int64_t i) {
                     if (i == 7) throw Error("boom");
                   },
                   3),
               Error);
}

TEST(WorkerCount, ReadsEnvironment) {
  ::setenv("XSURV_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3);
  ::setenv("XSURV_THREADS", "0", 1);
  EXPECT_THROW(worker_count(), Error);
  ::setenv("XSURV_THREADS", "two", 1);
  EXPECT_THROW(worker_count(), Error);
  ::unsetenv("XSURV_THREADS");
  EXPECT_GE(worker_count(), 1);
}

TEST(PhantomDataset, IndependentOfWorkerCount) {
  PhantomSpec s;
  s.grid = 36;
  const auto cal = calibrate_phantoms(s, 2000);
  const PreprocessOptions opt{16, 1024.0, 2.0};
  ::setenv("XSURV_THREADS", "1", 1);
  const auto a = phantom_dataset(s, 0, 5, opt, cal);
  ::setenv("XSURV_THREADS", "4", 1);
  const auto b = phantom_dataset(s, 0, 5, opt, cal);
  ::unsetenv("XSURV_THREADS");
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a.ids, b.ids);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].pet.data, b.samples[i].pet.data);
    EXPECT_EQ(a.samples[i].mln_mask.data, b.samples[i].mln_mask.data);
    EXPECT_EQ(a.records[i].time_days, b.records[i].time_days);
  }
}

TEST(SplitValidation, TailHoldOut) {
  PhantomSpec s;
  s.grid = 36;
  const auto d = phantom_dataset(s, 0, 10, {12, 1024.0, 3.0}, calibrate_phantoms(s, 2000));
  const auto [tr, va] = split_validation(d, 0.25);
  EXPECT_EQ(tr.size(), 7u);
  EXPECT_EQ(va.size(), 3u);
  EXPECT_EQ(va.ids.front(), d.ids[7]);
  const auto [all, same] = split_validation(d, 0.0);
  EXPECT_EQ(all.ids, same.ids);
  EXPECT_THROW(split_validation(take(d, 0, 1), 0.5), Error);
}

TEST(RunConfig, PresetAblationAndRoundTrip) {
  const auto c = RunConfig::from_json(Json{{"model", {{"preset", "tiny"}, {"ablation", "early_fusion"}, {"dropout", 0.0}}}});
  EXPECT_EQ(c.model, [] {
    auto m = ablation_config(tiny_config(), Ablation::kEarlyFusion);
    m.dropout = 0.0;
    return m;
  }());
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(RunConfig::from_json(Json{{"modle", Json::object()}}), Error);
  EXPECT_THROW(RunConfig::from_json(Json{{"data", {{"n_train", 5}, {"extra", 1}}}}), Error);
  EXPECT_THROW(RunConfig::from_json(Json{{"model", {{"preset", "huge"}}}}), Error);
}
