#include <gtest/gtest.h>

#include <cmath>

#include "roictrl/diffusion.hpp"
#include "roictrl/ops.hpp"
#include "support.hpp"

using namespace roictrl;

TEST(RoiSize, ScheduleAcrossResolutions) {
  EXPECT_EQ(roi_size(64), 25);
  EXPECT_EQ(roi_size(32), 19);
  EXPECT_EQ(roi_size(16), 13);
  EXPECT_EQ(roi_size(8), 7);
  EXPECT_EQ(roi_size(4), 1);
  for (std::int64_t R : {8, 16, 32, 64}) EXPECT_EQ(roi_size(R, true), 7);
  EXPECT_THROW(roi_size(3), ParameterError);
  // non-power-of-two sides round to the nearest integer
  EXPECT_EQ(roi_size(48), std::llround(6 * std::log2(48.0) - 11));
}

TEST(NoiseSchedule, MonotoneLinearBetas) {
  auto s = NoiseSchedule::linear();
  ASSERT_EQ(s.size(), 1000);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
  for (int t = 1; t < s.size(); ++t) {
    EXPECT_GT(s.betas[t], s.betas[t - 1]);
    EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
    EXPECT_GT(s.betas[t], 0.0);
    EXPECT_LT(s.betas[t], 1.0);
  }
}

TEST(QSample, Examples) {
  auto s = NoiseSchedule::linear();
  Rng rng = make_rng(1);
  auto x0 = normal<double>({1, 3, 4, 4}, rng);
  auto eps = normal<double>({1, 3, 4, 4}, rng);
  EXPECT_LT(max_abs_diff(q_sample(x0, 0, eps, s), x0), 0.05);
  auto z = q_sample(x0, 500, Tensor<double>(x0.shape()), s);
  for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z[i], std::sqrt(s.alpha_bars[500]) * x0[i]);
  auto r = q_sample(x0, 731, eps, s);
  for (std::int64_t i = 0; i < z.numel(); ++i)
    EXPECT_EQ(r[i], std::sqrt(s.alpha_bars[731]) * x0[i] + std::sqrt(1.0 - s.alpha_bars[731]) * eps[i]);
  EXPECT_THROW(q_sample(x0, 1000, eps, s), ParameterError);
  EXPECT_THROW(q_sample(x0, -1, eps, s), ParameterError);
}

TEST(Ddim, Timesteps) {
  EXPECT_EQ(ddim_timesteps(1, 1000), std::vector<int>{999});
  auto ts = ddim_timesteps(50, 1000);
  EXPECT_EQ(ts.front(), 19);
  EXPECT_EQ(ts.back(), 999);
  EXPECT_THROW(ddim_timesteps(0, 1000), ParameterError);
}

TEST(Ddim, OracleNoiseRecoversCleanImage) {
  auto s = NoiseSchedule::linear();
  Rng rng = make_rng(2);
  auto x0 = uniform<double>({1, 3, 8, 8}, rng, -1, 1);
  auto eps = normal<double>(x0.shape(), rng);
  auto zT = q_sample(x0, 999, eps, s);
  NoisePredictor<double> oracle = [&](const Tensor<double>&, int) { return eps; };
  auto out = ddim_sample_from(zT, oracle, s, 1, false);
  EXPECT_LT(max_abs_diff(out, x0), 1e-5);
}

TEST(Ddim, OneStepIsDirectPrediction) {
  auto s = NoiseSchedule::linear();
  Rng rng = make_rng(3);
  auto z = normal<double>({1, 3, 4, 4}, rng);
  auto field = normal<double>(z.shape(), rng);
  NoisePredictor<double> model = [&](const Tensor<double>& zt, int t) {
    EXPECT_EQ(t, 999);
    return mul(zt, field);
  };
  auto out = ddim_sample_from(z, model, s, 1, false);
  const double ab = s.alpha_bars[999];
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    const double eps = z[i] * field[i];
    EXPECT_NEAR(out[i], (z[i] - std::sqrt(1 - ab) * eps) / std::sqrt(ab), 1e-9);
  }
}

TEST(Ddim, SameSeedIsBitIdentical) {
  auto s = NoiseSchedule::linear();
  NoisePredictor<float> model = [](const Tensor<float>& z, int t) { return scale(z, 0.3f + 1e-4f * t); };
  auto a = ddim_sample<float>({1, 3, 8, 8}, model, s, 10, 7);
  auto b = ddim_sample<float>({1, 3, 8, 8}, model, s, 10, 7);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, ddim_sample<float>({1, 3, 8, 8}, model, s, 10, 8));
}
