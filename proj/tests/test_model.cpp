#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <random>

#include "roictrl/model.hpp"
#include "support.hpp"

using namespace roictrl;
using namespace roictrl::test;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.c_hi = 4;
  cfg.c_lo = 6;
  cfg.text_dim = 5;
  cfg.temb_dim = 8;
  return cfg;
}

ToyScene tiny_scene(std::uint64_t seed) {
  LayoutOptions o;
  o.height = o.width = 8;
  o.min_instances = 1;
  o.max_instances = 3;
  o.min_side = 2;
  o.max_side = 6;
  return synth_scene(seed, o);
}

/// Checks two random entries of every parameter tensor against central
/// differences of the total loss.
GradCheck probe_model(const ModelConfig& cfg, std::uint64_t seed) {
  ToyModel<double> model(cfg, seed);
  // push the zero-initialised gates and output weights away from zero so
  // every path carries gradient
  Rng rng = make_rng(seed, 77);
  model.weights.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.values()) v += 0.05 * std::normal_distribution<double>()(rng);
  });
  const auto scene = tiny_scene(seed);
  const auto sched = NoiseSchedule::linear();
  const int t = std::uniform_int_distribution<int>(0, 999)(rng);
  const auto eps = normal<double>({1, 3, 8, 8}, rng);
  const double alpha = 0.5;
  auto grads = model.zero_grads();
  ldm_loss(model, scene, t, eps, sched, alpha, &grads);
  auto total = [&](const ToyModel<double>& m) {
    const auto l = ldm_loss(m, scene, t, eps, sched, alpha);
    return l.l_ldm + alpha * l.l_reg;
  };
  std::vector<Tensor<double>*> params, gparams;
  std::vector<std::string> names;
  model.weights.visit("", [&](const std::string& n, Tensor<double>& p) {
    params.push_back(&p);
    names.push_back(n);
  });
  grads.visit("", [&](const std::string&, Tensor<double>& p) { gparams.push_back(&p); });
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::uniform_int_distribution<std::int64_t> pick(0, params[k]->numel() - 1);
    for (int rep = 0; rep < 2; ++rep) {
      const std::int64_t i = pick(rng);
      const double orig = (*params[k])[i];
      (*params[k])[i] = orig + kFdStep;
      const double fp = total(model);
      (*params[k])[i] = orig - kFdStep;
      const double fm = total(model);
      (*params[k])[i] = orig;
      const double num = (fp - fm) / (2 * kFdStep), ana = (*gparams[k])[i];
      if (std::abs(ana - num) > kFdRtol * std::abs(num) + kFdAtol) {
        return {false, 0, names[k] + "[" + std::to_string(i) + "] analytic " + std::to_string(ana) + " numeric " +
                              std::to_string(num)};
      }
    }
  }
  return {};
}

}  // namespace

TEST(LdmLoss, TrivialEndpoints) {
  Rng rng = make_rng(1);
  auto eps = normal<double>({1, 3, 8, 8}, rng);
  EXPECT_EQ(mse(eps, eps), 0.0);
  double ms = 0;
  for (double v : eps.values()) ms += v * v;
  EXPECT_NEAR(mse(Tensor<double>(eps.shape()), eps), ms / eps.numel(), 1e-15);
}

TEST(ToyModel, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto r = probe_model(tiny_config(), seed);
    EXPECT_TRUE(r.ok) << "seed " << seed << ": " << r.detail;
  }
}

TEST(ToyModel, AblationGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = tiny_config();
    cfg.self_attention = false;
    EXPECT_TRUE(probe_model(cfg, seed).ok);
    cfg = tiny_config();
    cfg.frame = CoordinateFrame::local;
    auto r = probe_model(cfg, seed);
    EXPECT_TRUE(r.ok) << r.detail;
  }
}

TEST(ToyModel, AblationsChangeManifestAndGraph) {
  const auto base_cfg = tiny_config();
  ToyModel<float> base(base_cfg, 0);
  auto cfg = base_cfg;
  cfg.self_attention = false;
  ToyModel<float> no_self(cfg, 0);
  auto names = parameter_manifest(no_self.weights);
  EXPECT_TRUE(std::none_of(names.begin(), names.end(),
                           [](const std::string& n) { return n.find("self_attn") != std::string::npos; }));
  auto base_names = parameter_manifest(base.weights);
  EXPECT_EQ(std::count_if(base_names.begin(), base_names.end(),
                          [](const std::string& n) { return n.find("self_attn") != std::string::npos; }),
            10);
  EXPECT_EQ(parameter_count(base.weights) - parameter_count(no_self.weights),
            (49 * 4 + 3 * 16 + 16) + (1 * 6 + 3 * 36 + 36));

  auto fp = base.graph_fingerprint();
  auto fp_no_self = no_self.graph_fingerprint();
  EXPECT_EQ(fp.size(), fp_no_self.size() + 2);
  EXPECT_NE(std::find(fp.begin(), fp.end(), "adapter_hi.roi_self_attention"), fp.end());
  EXPECT_EQ(std::find(fp_no_self.begin(), fp_no_self.end(), "adapter_hi.roi_self_attention"), fp_no_self.end());

  cfg = base_cfg;
  cfg.frame = CoordinateFrame::local;
  ToyModel<float> local(cfg, 0);
  EXPECT_EQ(parameter_count(local.weights), parameter_count(base.weights));
  auto fp_local = local.graph_fingerprint();
  EXPECT_NE(std::find(fp_local.begin(), fp_local.end(), "adapter_hi.box_guidance.local"), fp_local.end());

  cfg = base_cfg;
  cfg.single_scale = true;
  cfg.image_size = 64;
  EXPECT_EQ(cfg.r_hi(), 7);
  EXPECT_EQ(cfg.r_lo(), 7);
  cfg.single_scale = false;
  EXPECT_EQ(cfg.r_hi(), 25);
  EXPECT_EQ(cfg.r_lo(), 19);
}

TEST(ToyModel, DeterministicAndThreadInvariantInputs) {
  ToyModel<float> a(tiny_config(), 3), b(tiny_config(), 3);
  const auto scene = tiny_scene(3);
  const auto cond = Conditions::from(scene.layout);
  Rng rng = make_rng(9);
  const auto z = normal<float>({1, 3, 8, 8}, rng);
  EXPECT_EQ(a.forward(z, 500, cond).eps, b.forward(z, 500, cond).eps);
}

TEST(ToyModel, RunsOnWiderCanvasAndEmptyLayouts) {
  ToyModel<float> m(tiny_config(), 4);
  LayoutSpec wide;
  wide.height = 8;
  wide.width = 16;
  wide.instances.push_back({RoiBox::make(0.1, 0.2, 0.6, 0.9), 2, ShapeKind::circle});
  EXPECT_EQ(m.forward(Tensor<float>({1, 3, 8, 16}), 10, Conditions::from(wide)).eps.shape(), (Shape{1, 3, 8, 16}));
  LayoutSpec empty;
  empty.height = empty.width = 8;
  auto out = m.forward(Tensor<float>({1, 3, 8, 8}), 10, Conditions::from(empty));
  EXPECT_EQ(out.l_reg, 0.0f);
}

TEST(ToyModel, CopyParamsRoundTripsPrecision) {
  ToyModel<double> d(tiny_config(), 5);
  ToyModel<float> f(tiny_config(), 6);
  copy_params(f.weights, d.weights);
  ToyModel<double> back(tiny_config(), 7);
  copy_params(back.weights, f.weights);
  auto pd = parameter_manifest(d.weights);
  EXPECT_EQ(pd, parameter_manifest(back.weights));
  EXPECT_NEAR(max_abs_diff(back.weights.embed, d.weights.embed), 0.0, 1e-6);
  auto cfg = tiny_config();
  cfg.self_attention = false;
  ToyModel<float> other(cfg, 0);
  EXPECT_THROW(copy_params(other.weights, d.weights), DimensionError);
}

TEST(ToyModel, DefaultSizeTiming) {
  ToyModel<float> m(ModelConfig{}, 0);
  LayoutOptions o;
  o.min_instances = 6;
  o.max_instances = 6;
  const auto scene = synth_scene(1, o);
  const auto sched = NoiseSchedule::linear();
  Rng rng = make_rng(2);
  const auto eps = normal<float>({1, 3, 64, 64}, rng);
  auto g = m.zero_grads();
  const auto t0 = std::chrono::steady_clock::now();
  const int reps = 3;
  for (int k = 0; k < reps; ++k) ldm_loss(m, scene, 500, eps, sched, 0.01f, &g);
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
  const auto t1 = std::chrono::steady_clock::now();
  for (int k = 0; k < reps; ++k) m.forward(eps, 500, Conditions::from(scene.layout));
  const double fwd =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count() / reps;
  std::printf("params %lld, fwd+bwd %.1f ms, fwd %.1f ms (6 instances)\n",
              static_cast<long long>(parameter_count(m.weights)), ms, fwd);
}
