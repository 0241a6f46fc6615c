#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "roictrl/eval.hpp"
#include "roictrl/scene.hpp"
#include "support.hpp"

using namespace roictrl;

namespace {

LayoutSpec one_instance(RoiBox box, int color, ShapeKind shape, int bg = 0) {
  LayoutSpec l;
  l.background = bg;
  l.instances.push_back({box, color, shape});
  return l;
}

double brute_force_best(const std::vector<double>& m, int rows, int cols) {
  // enumerate injective maps from the smaller side into the larger
  const bool tall = rows > cols;
  const int small = tall ? cols : rows, large = tall ? rows : cols;
  std::vector<int> idx(static_cast<std::size_t>(large));
  std::iota(idx.begin(), idx.end(), 0);
  double best = 0;
  do {
    double tot = 0;
    for (int k = 0; k < small; ++k) {
      const int i = tall ? idx[k] : k, j = tall ? k : idx[k];
      tot += m[static_cast<std::size_t>(i * cols + j)];
    }
    best = std::max(best, tot);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return best;
}

}  // namespace

TEST(Scene, RedSquareRaster) {
  auto s = render_scene(one_instance(RoiBox::make(0.25, 0.25, 0.75, 0.75), 1, ShapeKind::square));
  std::int64_t red = 0, black = 0;
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t x = 0; x < 64; ++x) {
      const bool inside = y >= 16 && y < 48 && x >= 16 && x < 48;
      const double r = s.image.at(0, y, x), g = s.image.at(1, y, x), b = s.image.at(2, y, x);
      if (inside) {
        EXPECT_TRUE(r == 1 && g == -1 && b == -1);
        ++red;
      } else {
        EXPECT_TRUE(r == -1 && g == -1 && b == -1);
        ++black;
      }
    }
  EXPECT_EQ(red, 32 * 32);
  EXPECT_EQ(black, 64 * 64 - 32 * 32);
}

TEST(Scene, EmptyLayoutIsUniformAndSeedsAreDeterministic) {
  LayoutSpec l;
  l.background = 1;
  auto s = render_scene(l);
  for (double v : s.image.values()) EXPECT_EQ(v, 0.0);
  LayoutOptions o;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto a = synth_scene(seed, o), b = synth_scene(seed, o);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.layout.instances.size(), b.layout.instances.size());
  }
}

TEST(Scene, ShapesStayInsideTheirBoxesAndTouchAllEdges) {
  Rng rng = make_rng(4);
  for (int k = 0; k < 200; ++k) {
    auto layout = random_layout(rng, {64, 64, 1, 1});
    const auto& inst = layout.instances.at(0);
    std::int64_t x0 = 64, y0 = 64, x1 = 0, y1 = 0;
    for (std::int64_t y = 0; y < 64; ++y)
      for (std::int64_t x = 0; x < 64; ++x)
        if (shape_covers(inst, 64, 64, y, x)) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
    EXPECT_EQ(x0, std::llround(inst.box.x1 * 64));
    EXPECT_EQ(y0, std::llround(inst.box.y1 * 64));
    EXPECT_EQ(x1, std::llround(inst.box.x2 * 64));
    EXPECT_EQ(y1, std::llround(inst.box.y2 * 64));
  }
}

TEST(Scene, OcclusionFollowsDrawOrder) {
  LayoutSpec l;
  l.instances.push_back({RoiBox::make(0.1, 0.1, 0.6, 0.6), 1, ShapeKind::square});
  l.instances.push_back({RoiBox::make(0.3, 0.3, 0.8, 0.8), 4, ShapeKind::square});
  auto s = render_scene(l);
  EXPECT_EQ(s.image.at(2, 30, 30), 1.0);  // blue on top
  EXPECT_LT(s.visibility[0], 1.0);
  EXPECT_EQ(s.visibility[1], 1.0);
}

TEST(Iou, Examples) {
  const auto a = RoiBox::make(0, 0, 1, 1), b = RoiBox::make(0, 0, 0.5, 1), c = RoiBox::make(0.6, 0, 0.9, 0.3);
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, b), 0.5);
  EXPECT_EQ(iou(b, c), 0.0);
  Rng rng = make_rng(5);
  std::uniform_real_distribution<double> u(0, 0.5);
  for (int k = 0; k < 100; ++k) {
    const auto p = RoiBox::make(u(rng), u(rng), 0.5 + u(rng), 0.5 + u(rng));
    const auto q = RoiBox::make(u(rng), u(rng), 0.5 + u(rng), 0.5 + u(rng));
    EXPECT_EQ(iou(p, q), iou(q, p));
    EXPECT_EQ(iou(p, p), 1.0);
  }
}

TEST(Hungarian, Examples) {
  auto m = hungarian_match({0.9, 0.1, 0.1, 0.9}, 2, 2);
  ASSERT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.pairs[0], (std::pair<int, int>{0, 0}));
  EXPECT_EQ(m.pairs[1], (std::pair<int, int>{1, 1}));
  auto r = hungarian_match({0.2, 0.8}, 1, 2);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0], (std::pair<int, int>{0, 1}));
  EXPECT_EQ(r.unmatched_cols, std::vector<int>{0});
  auto z = hungarian_match({0.0, 0.0, 0.0, 0.7}, 2, 2);
  ASSERT_EQ(z.pairs.size(), 1u);
  EXPECT_EQ(z.unmatched_rows, std::vector<int>{0});
  EXPECT_TRUE(hungarian_match({}, 0, 3).pairs.empty());
}

TEST(Hungarian, EqualsBruteForceUpToSixBySix) {
  Rng rng = make_rng(6);
  std::uniform_int_distribution<int> side(1, 6);
  std::uniform_real_distribution<double> u(0, 1);
  std::bernoulli_distribution zero(0.3);
  for (int k = 0; k < 1000; ++k) {
    const int rows = side(rng), cols = side(rng);
    std::vector<double> m(static_cast<std::size_t>(rows * cols));
    for (auto& v : m) v = zero(rng) ? 0.0 : u(rng);
    auto res = hungarian_match(m, rows, cols);
    EXPECT_NEAR(res.total, brute_force_best(m, rows, cols), 1e-12);
    std::vector<int> rs, cs;
    for (auto [i, j] : res.pairs) {
      rs.push_back(i);
      cs.push_back(j);
      EXPECT_GT(m[static_cast<std::size_t>(i * cols + j)], 0.0);
    }
    std::sort(rs.begin(), rs.end());
    std::sort(cs.begin(), cs.end());
    EXPECT_EQ(std::adjacent_find(rs.begin(), rs.end()), rs.end());
    EXPECT_EQ(std::adjacent_find(cs.begin(), cs.end()), cs.end());
  }
}

TEST(Detect, SingleRedSquare) {
  auto s = render_scene(one_instance(RoiBox::make(0.25, 0.25, 0.75, 0.75), 1, ShapeKind::square));
  auto d = detect(s.image);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_GE(iou(d[0].box, s.layout.instances[0].box), 0.95);
  EXPECT_EQ(d[0].color, 1);
  EXPECT_EQ(d[0].shape, ShapeKind::square);
  EXPECT_GE(d[0].confidence, 0.0);
  EXPECT_LE(d[0].confidence, 1.0);
}

TEST(Detect, UniformBackgroundIsEmpty) {
  for (int bg = 0; bg < kNumBackgrounds; ++bg) {
    LayoutSpec l;
    l.background = bg;
    EXPECT_TRUE(detect(render_scene(l).image).empty());
  }
}

TEST(Detect, RoundTripOnNonOverlappingScenes) {
  LayoutOptions o;
  o.min_instances = 1;
  o.allow_overlap = false;
  std::int64_t instances = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto s = synth_scene(seed, o);
    auto outcomes = score_scene(s, s.image);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      ++instances;
      EXPECT_GE(outcomes[i].iou, 0.9) << "seed " << seed << " " << s.layout.instances[i].describe();
      EXPECT_TRUE(outcomes[i].color_ok) << "seed " << seed;
      EXPECT_TRUE(outcomes[i].shape_ok) << "seed " << seed << " " << s.layout.instances[i].describe();
    }
  }
  EXPECT_GT(instances, 300);
}

TEST(BenchMetrics, PerfectBlankAndHalf) {
  LayoutOptions o;
  o.min_instances = 1;
  o.allow_overlap = false;
  std::vector<ToyScene> scenes;
  std::vector<Tensor<double>> perfect, blank, half;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    scenes.push_back(synth_scene(seed, o));
    LayoutSpec bg;
    bg.background = scenes.back().layout.background;
    perfect.push_back(scenes.back().image);
    blank.push_back(render_scene(bg).image);
  }
  auto mp = bench_metrics(scenes, perfect);
  EXPECT_GE(mp.overall().miou, 0.95);
  EXPECT_GE(mp.overall().acc_color, 0.99);
  EXPECT_GE(mp.overall().acc_shape, 0.99);
  auto mb = bench_metrics(scenes, blank);
  EXPECT_EQ(mb.overall().miou, 0.0);
  EXPECT_EQ(mb.overall().acc_color, 0.0);
  EXPECT_EQ(mb.overall().acc_shape, 0.0);
  // halve by duplicating: every scene appears once perfect and once blank
  std::vector<ToyScene> doubled = scenes;
  doubled.insert(doubled.end(), scenes.begin(), scenes.end());
  half = perfect;
  half.insert(half.end(), blank.begin(), blank.end());
  auto mh = bench_metrics(doubled, half);
  EXPECT_NEAR(mh.overall().miou, mp.overall().miou / 2, 1e-12);
  EXPECT_THROW(bench_metrics(scenes, std::vector<Tensor<double>>{}), DimensionError);
}

TEST(BenchMetrics, CsvLayout) {
  LayoutOptions o;
  o.min_instances = 1;
  o.allow_overlap = false;
  std::vector<ToyScene> scenes{synth_scene(1, o), synth_scene(2, o)};
  std::vector<Tensor<double>> imgs{scenes[0].image, scenes[1].image};
  std::ostringstream os;
  write_metrics_csv(os, "default", bench_metrics(scenes, imgs));
  const auto text = os.str();
  EXPECT_EQ(text.rfind("track,n_instances,size_bucket,mIoU,acc_color,acc_shape,success_rate\n", 0), 0u);
  EXPECT_NE(text.find("default,all,all,1,1,1,1\n"), std::string::npos);
}
