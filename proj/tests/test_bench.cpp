#include <gtest/gtest.h>

#include <sstream>

#include "roictrl/bench.hpp"

using namespace roictrl;

namespace {

// Independent transcription of the cost model for one query-side attention.
double attention_oracle(double nq, double L, double c) {
  double flops = 0;
  flops += 2 * nq * c * c;      // q projection
  flops += 2 * nq * L * c;      // scores
  flops += 3 * nq * L;          // softmax
  flops += 2 * nq * L * c;      // weighted values
  flops += 2 * nq * c * c;      // output projection
  return flops;
}

}  // namespace

TEST(FlopModel, NoInstancesLeavesOnlyGlobalTerm) {
  for (auto p : {InjectionPath::mask, InjectionPath::roi}) {
    const auto f = flop_model(p, {64, 64, 25, 0, 32, 4});
    EXPECT_EQ(f.instance(), 0.0);
    EXPECT_EQ(f.total(), f.global);
  }
  EXPECT_EQ(flop_model(InjectionPath::mask, {64, 64, 25, 0, 32, 4}).total(),
            flop_model(InjectionPath::roi, {64, 64, 25, 0, 32, 4}).total());
}

TEST(FlopModel, FullLatticeMatchesMaskAttention) {
  const BenchConfig g{16, 16, 16, 3, 8, 2};
  EXPECT_EQ(flop_model(InjectionPath::roi, g).instance_attention,
            flop_model(InjectionPath::mask, g).instance_attention);
}

TEST(FlopModel, AttentionRatioIsLatticeOverPixels) {
  const BenchConfig g{128, 128, 25, 25, 64, 4};
  const double ratio = flop_model(InjectionPath::roi, g).instance_attention /
                       flop_model(InjectionPath::mask, g).instance_attention;
  EXPECT_NEAR(ratio, 625.0 / 16384.0, 1e-15);
  EXPECT_DOUBLE_EQ(flop_model(InjectionPath::mask, g).instance_attention, 25 * attention_oracle(16384, 4, 64));
  EXPECT_DOUBLE_EQ(flop_model(InjectionPath::roi, g).instance_attention, 25 * attention_oracle(625, 4, 64));
}

TEST(FlopModel, LinearInInstanceCount) {
  for (auto p : {InjectionPath::mask, InjectionPath::roi}) {
    const auto a = flop_model(p, {64, 64, 25, 5, 32, 4});
    const auto b = flop_model(p, {64, 64, 25, 10, 32, 4});
    EXPECT_DOUBLE_EQ(b.instance(), 2 * a.instance());
    EXPECT_EQ(a.global, b.global);
  }
}

TEST(FlopModel, RoiInstanceAttentionIndependentOfCanvas) {
  const double ref = flop_model(InjectionPath::roi, {32, 32, 25, 25, 32, 4}).instance_attention;
  for (std::int64_t s : {64, 128, 256, 512}) {
    const auto f = flop_model(InjectionPath::roi, {s, 2 * s, 25, 25, 32, 4});
    EXPECT_EQ(f.instance_attention, ref);
    EXPECT_EQ(f.refine, flop_model(InjectionPath::roi, {32, 32, 25, 25, 32, 4}).refine);
  }
}

TEST(FlopModel, RejectsNonPositiveExtents) {
  EXPECT_THROW(flop_model(InjectionPath::roi, {0, 8, 4, 1, 4, 1}), ParameterError);
  EXPECT_THROW(flop_model(InjectionPath::mask, {8, 8, 4, 1, 4, 0}), ParameterError);
}

TEST(Spearman, Examples) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman({1, 2, 3}, {1, 3, 2}), 0.5, 1e-12);
}

TEST(RunBench, SmallGridReportsBothPaths) {
  BenchOptions o;
  o.grid = {{16, 16, 5, 3, 8, 2}, {32, 32, 5, 3, 8, 2}};
  o.warmup = 1;
  const auto reps = run_bench(o);
  ASSERT_EQ(reps.size(), 4u);
  for (const auto& r : reps) {
    EXPECT_TRUE(r.skipped.empty());
    EXPECT_GT(r.flops.total(), 0);
    EXPECT_GT(r.ns_median, 0);
    EXPECT_GT(r.bytes_peak, 0);
    EXPECT_EQ(r.runs, 5);
  }
  // both paths hold [n, c, h, w] instance maps
  EXPECT_GE(reps[1].bytes_peak, 3 * 8 * 16 * 16 * 4);
  const auto again = run_bench(o);
  for (std::size_t k = 0; k < reps.size(); ++k) EXPECT_EQ(reps[k].flops.total(), again[k].flops.total());

  std::ostringstream os;
  write_bench_csv(os, reps);
  const std::string header = os.str().substr(0, os.str().find('\n'));
  EXPECT_EQ(header.rfind("path,h,w,r,n,c,L,flops_analytic,ns_median,bytes_peak", 0), 0u);
}

TEST(RunBench, TooFewRunsRejected) {
  BenchOptions o;
  o.grid = {{16, 16, 5, 3, 8, 2}};
  o.runs = 3;
  EXPECT_THROW(run_bench(o), ParameterError);
}

TEST(RunBench, OverBudgetIsSkippedWithReason) {
  BenchOptions o;
  o.grid = {{64, 64, 5, 3, 8, 2}};
  o.byte_budget = 1024;
  const auto reps = run_bench(o);
  ASSERT_EQ(reps.size(), 2u);
  for (const auto& r : reps) {
    EXPECT_NE(r.skipped.find("exceeds budget"), std::string::npos);
    EXPECT_EQ(r.ns_median, 0);
  }
}

TEST(RunBench, MaskPathScalesWithPixelCount) {
  BenchOptions o;
  o.grid = {{64, 64, 9, 6, 16, 4}, {128, 128, 9, 6, 16, 4}};
  const auto reps = run_bench(o);
  const double measured = reps[3].ns_median / reps[1].ns_median;
  const double analytic = reps[3].flops.instance_attention / reps[1].flops.instance_attention;
  EXPECT_GT(measured, analytic / 2);
  EXPECT_LT(measured, analytic * 2);
}
