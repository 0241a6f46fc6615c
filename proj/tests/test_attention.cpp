#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "roictrl/attention.hpp"
#include "support.hpp"

using namespace roictrl;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(static_cast<std::size_t>(t.extent(0)), std::vector<double>(static_cast<std::size_t>(t.extent(1))));
  for (std::int64_t i = 0; i < t.extent(0); ++i)
    for (std::int64_t j = 0; j < t.extent(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat attend(const Mat& q, const Mat& k, const Mat& v) {
  const double s = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> e(k.size());
    double tot = 0;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0;
      for (std::size_t t = 0; t < q[0].size(); ++t) dot += q[i][t] * k[j][t];
      e[j] = std::exp(dot * s);
      tot += e[j];
    }
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t t = 0; t < v[0].size(); ++t) out[i][t] += e[j] / tot * v[j][t];
  }
  return out;
}

Mat layer_norm_rows(const Mat& x) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0, var = 0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (double& v : row) v = (v - mean) / std::sqrt(var + kLayerNormEps);
  }
  return y;
}

CaptionEmbedding<double> caption(std::int64_t len, std::int64_t dt, Rng& rng) {
  return {normal<double>({len, dt}, rng), std::nullopt};
}

}  // namespace

TEST(CrossAttention, SingleTokenReturnsValueProjection) {
  Rng rng = make_rng(1);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto q = normal<double>({6, 4}, rng);
  auto cap = caption(1, 3, rng);
  auto out = cross_attention(q, cap, w);
  auto expect = linear(linear(cap.tokens, w.wv), w.wo);
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), expect.at(0, j), 1e-12);
}

TEST(CrossAttention, DuplicatedTokenMatchesSingle) {
  Rng rng = make_rng(2);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto q = normal<double>({6, 4}, rng);
  auto cap = caption(1, 3, rng);
  CaptionEmbedding<double> twice{Tensor<double>({2, 3}), std::nullopt};
  for (int t = 0; t < 2; ++t)
    for (int j = 0; j < 3; ++j) twice.tokens.at(t, j) = cap.tokens.at(0, j);
  auto a = cross_attention(q, cap, w), b = cross_attention(q, twice, w);
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
}

TEST(CrossAttention, MatchesScalarLoopOracle) {
  Rng rng = make_rng(3);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto q = normal<double>({4, 4}, rng);
  auto cap = caption(3, 3, rng);
  auto out = cross_attention(q, cap, w);
  auto ref = mm(attend(mm(to_mat(q), to_mat(w.wq)), mm(to_mat(cap.tokens), to_mat(w.wk)),
                       mm(to_mat(cap.tokens), to_mat(w.wv))),
                to_mat(w.wo));
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), ref[i][j], 1e-6);
}

TEST(CrossAttention, WidthMismatchIsDimensionError) {
  Rng rng = make_rng(4);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  EXPECT_THROW(cross_attention(normal<double>({2, 5}, rng), caption(2, 3, rng), w), DimensionError);
  EXPECT_THROW(cross_attention(normal<double>({2, 4}, rng), caption(2, 2, rng), w), DimensionError);
}

TEST(CrossAttention, RowsSumToOne) {
  Rng rng = make_rng(5);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  CrossAttentionCache<double> cache;
  cross_attention(normal<double>({7, 4}, rng, 3.0), caption(4, 3, rng), w, &cache);
  for (std::int64_t i = 0; i < 7; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < 4; ++j) s += cache.core.probs.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(CrossAttention, VjpMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, 10);
    auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
    auto q = normal<double>({5, 4}, rng);
    auto cap = caption(3, 3, rng);
    auto g = test::cotangent({5, 4}, rng);
    CrossAttentionCache<double> cache;
    cross_attention(q, cap, w, &cache);
    auto gw = test::zeros_like_weights(w);
    auto gi = cross_attention_vjp(cache, w, g, gw);
    auto rq = test::check_gradient(
        [&](const Tensor<double>& v) { return test::probe(cross_attention(v, cap, w), g); }, q, gi.queries);
    EXPECT_TRUE(rq.ok) << rq.detail;
    auto rc = test::check_gradient(
        [&](const Tensor<double>& v) {
          return test::probe(cross_attention(q, CaptionEmbedding<double>{v, std::nullopt}, w), g);
        },
        cap.tokens, gi.caption);
    EXPECT_TRUE(rc.ok) << rc.detail;
    auto rw = test::check_weight_gradients(w, gw, [&](const CrossAttentionWeights<double>& ww) {
      return test::probe(cross_attention(q, cap, ww), g);
    });
    EXPECT_TRUE(rw.ok) << rw.detail;
  }
}

TEST(RoiSelfAttention, ZeroOutputProjectionIsIdentity) {
  Rng rng = make_rng(6);
  auto w = RoiSelfAttentionWeights<double>::init(3, 4, 5, rng);
  auto stack = normal<double>({1, 2, 4, 3, 3}, rng);
  EXPECT_EQ(roi_self_attention(stack, RoiBoxBatch::from({RoiBox{}, RoiBox{}}), w), stack);
}

TEST(RoiSelfAttention, InstancesAreIsolated) {
  Rng rng = make_rng(7);
  auto w = RoiSelfAttentionWeights<double>::init(3, 4, 5, rng);
  fill_normal(w.wo, rng);
  auto stack = normal<double>({1, 2, 4, 3, 3}, rng);
  auto boxes = RoiBoxBatch::from({RoiBox{}, RoiBox{}});
  auto a = roi_self_attention(stack, boxes, w);
  auto perturbed = stack;
  for (std::int64_t k = 0; k < 36; ++k) perturbed[36 + k] += 1.0;
  auto b = roi_self_attention(perturbed, boxes, w);
  for (std::int64_t k = 0; k < 36; ++k) EXPECT_EQ(a[k], b[k]);
  EXPECT_GT(max_abs_diff(a, b), 0.1);
}

TEST(RoiSelfAttention, MatchesScalarLoopOracle) {
  Rng rng = make_rng(8);
  auto w = RoiSelfAttentionWeights<double>::init(2, 3, 4, rng);
  fill_normal(w.wo, rng);
  auto stack = normal<double>({1, 1, 3, 2, 2}, rng);
  auto out = roi_self_attention(stack, RoiBoxBatch::from({RoiBox{}}), w);
  Mat tokens(4, std::vector<double>(3));
  for (int p = 0; p < 4; ++p)
    for (int c = 0; c < 3; ++c) tokens[p][c] = stack[c * 4 + p] + w.pos.at(p, c);
  auto n = layer_norm_rows(tokens);
  auto att = mm(attend(mm(n, to_mat(w.wq)), mm(n, to_mat(w.wk)), mm(n, to_mat(w.wv))), to_mat(w.wo));
  for (int p = 0; p < 4; ++p)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(out[c * 4 + p], stack[c * 4 + p] + att[p][c], 1e-6);
}

TEST(RoiSelfAttention, VjpMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, 11);
    auto w = RoiSelfAttentionWeights<double>::init(2, 3, 4, rng);
    fill_normal(w.wo, rng);
    auto x = normal<double>({4, 3}, rng);
    auto g = test::cotangent({4, 3}, rng);
    RoiSelfAttentionCache<double> cache;
    roi_self_attention_tokens(x, w, &cache);
    auto gw = test::zeros_like_weights(w);
    auto gx = roi_self_attention_tokens_vjp(cache, w, g, gw);
    auto rx = test::check_gradient(
        [&](const Tensor<double>& v) { return test::probe(roi_self_attention_tokens(v, w), g); }, x, gx);
    EXPECT_TRUE(rx.ok) << rx.detail;
    auto rw = test::check_weight_gradients(w, gw, [&](const RoiSelfAttentionWeights<double>& ww) {
      return test::probe(roi_self_attention_tokens(x, ww), g);
    });
    EXPECT_TRUE(rw.ok) << rw.detail;
  }
}

TEST(MaskedInstanceAttention, FullBoxEqualsUnmaskedAttention) {
  Rng rng = make_rng(9);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto f = normal<double>({1, 4, 5, 6}, rng);
  std::vector<std::vector<CaptionEmbedding<double>>> caps{{caption(2, 3, rng)}};
  auto out = masked_instance_attention(f, caps, RoiBoxBatch::from({RoiBox{}}), w);
  auto ref = tokens_to_map(cross_attention(map_to_tokens(f), caps[0][0], w), 5, 6);
  EXPECT_EQ(out.reshaped({1, 4, 5, 6}), ref);
}

TEST(MaskedInstanceAttention, TilingBoxesPartitionTheMap) {
  Rng rng = make_rng(10);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto f = normal<double>({1, 4, 8, 8}, rng);
  std::vector<RoiBox> tiles{RoiBox::make(0, 0, 0.5, 0.5), RoiBox::make(0.5, 0, 1, 0.5),
                            RoiBox::make(0, 0.5, 0.5, 1), RoiBox::make(0.5, 0.5, 1, 1)};
  std::vector<std::vector<CaptionEmbedding<double>>> caps(1);
  for (int i = 0; i < 4; ++i) caps[0].push_back(caption(2, 3, rng));
  auto out = masked_instance_attention(f, caps, RoiBoxBatch::from(tiles), w);
  const auto tokens = map_to_tokens(f);
  for (std::int64_t y = 0; y < 8; ++y)
    for (std::int64_t x = 0; x < 8; ++x) {
      const std::int64_t owner = (y >= 4 ? 2 : 0) + (x >= 4 ? 1 : 0);
      auto ref = tokens_to_map(cross_attention(tokens, caps[0][owner], w), 8, 8);
      for (std::int64_t c = 0; c < 4; ++c) {
        double s = 0;
        for (std::int64_t i = 0; i < 4; ++i) s += out.at(0, i, c, y, x);
        EXPECT_EQ(s, ref.at(0, c, y, x));
      }
    }
}

TEST(MaskedInstanceAttention, HalfPixelEdgeShowsQuantizationBand) {
  // Right edge at 2.5 px on an 8-wide map: lround gives 3, the continuous
  // footprint covers centers 0.5..2.5 exclusive, i.e. columns 0 and 1.
  Rng rng = make_rng(11);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto f = normal<double>({1, 4, 8, 8}, rng);
  std::vector<std::vector<CaptionEmbedding<double>>> caps{{caption(2, 3, rng)}};
  auto boxes = RoiBoxBatch::from({RoiBox::make(0, 0, 2.5 / 8, 1)});
  auto out = masked_instance_attention(f, caps, boxes, w);
  auto occ = occupancy_mask<double>(boxes, 8, 8);
  const auto q = quantize_box(boxes.box(0, 0), 8, 8);
  EXPECT_EQ(q.x_hi, 3);
  for (std::int64_t y = 0; y < 8; ++y)
    for (std::int64_t x = 0; x < 8; ++x) {
      const bool masked = out.at(0, 0, 0, y, x) != 0.0;
      const bool occupied = occ.at(0, 0, 0, y, x) != 0.0;
      EXPECT_EQ(masked, x < q.x_hi);
      EXPECT_EQ(occupied, x < 2);
      EXPECT_EQ(masked && !occupied, x == 2);
    }
}

TEST(BoxGuidance, IdentityAtZeroGateAndWithoutBoxes) {
  Rng rng = make_rng(12);
  auto w = BoxGuidanceWeights<double>::init(4, 5, rng);
  auto f = normal<double>({1, 4, 5, 6}, rng);
  auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9)});
  EXPECT_EQ(box_guidance(f, boxes, 0, w), f);
  EXPECT_EQ(box_guidance(f, boxes, 0, w, CoordinateFrame::local), f);
  w.gate[0] = 0.7;
  EXPECT_EQ(box_guidance(f, RoiBoxBatch(1, 1), 0, w), f);
  EXPECT_NE(box_guidance(f, boxes, 0, w), f);
}

TEST(BoxGuidance, PermutationInvariant) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, 13);
    auto w = BoxGuidanceWeights<double>::init(4, 5, rng);
    w.gate[0] = 0.9;
    auto f = normal<double>({1, 4, 5, 6}, rng);
    std::vector<RoiBox> bx{RoiBox::make(0.1, 0.2, 0.5, 0.9), RoiBox::make(0.4, 0.0, 1.0, 0.6),
                           RoiBox::make(0.0, 0.5, 0.3, 1.0)};
    std::vector<RoiBox> perm{bx[2], bx[0], bx[1]};
    for (auto frame : {CoordinateFrame::global, CoordinateFrame::local}) {
      auto a = box_guidance(f, RoiBoxBatch::from(bx), 0, w, frame);
      auto b = box_guidance(f, RoiBoxBatch::from(perm), 0, w, frame);
      EXPECT_LT(max_abs_diff(a, b), 1e-12);
    }
  }
}

TEST(BoxGuidance, IdenticalBoxesGiveIdenticalEmbeddings) {
  auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9), RoiBox::make(0.1, 0.2, 0.5, 0.9)});
  auto f = box_fourier<double>(boxes, 0);
  for (std::int64_t j = 0; j < kBoxFourierWidth; ++j) EXPECT_EQ(f.at(0, j), f.at(1, j));
}

TEST(BoxGuidance, VjpMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    for (auto frame : {CoordinateFrame::global, CoordinateFrame::local}) {
      Rng rng = make_rng(seed, 14);
      auto w = BoxGuidanceWeights<double>::init(3, 4, rng);
      w.gate[0] = 0.6;
      fill_normal(w.box_bias, rng, 0.1);
      auto f = normal<double>({1, 3, 3, 4}, rng);
      auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9), RoiBox::make(0.3, 0.1, 0.9, 0.7)});
      auto g = test::cotangent(f.shape(), rng);
      BoxGuidanceCache<double> cache;
      box_guidance(f, boxes, 0, w, frame, &cache);
      auto gw = test::zeros_like_weights(w);
      auto gx = box_guidance_vjp(cache, w, g, gw);
      auto rx = test::check_gradient(
          [&](const Tensor<double>& v) { return test::probe(box_guidance(v, boxes, 0, w, frame), g); }, f, gx);
      EXPECT_TRUE(rx.ok) << rx.detail;
      auto rw = test::check_weight_gradients(w, gw, [&](const BoxGuidanceWeights<double>& ww) {
        return test::probe(box_guidance(f, boxes, 0, ww, frame), g);
      });
      EXPECT_TRUE(rw.ok) << rw.detail;
    }
  }
}

TEST(EmbeddingInjection, ZeroGateIsIdentity) {
  Rng rng = make_rng(15);
  auto w = EmbeddingInjectionWeights<double>::init(4, 3, 5, rng);
  auto f = normal<double>({1, 4, 3, 3}, rng);
  auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9)});
  EXPECT_EQ(embedding_injection_baseline(f, {caption(2, 3, rng)}, boxes, 0, w), f);
}

TEST(EmbeddingInjection, NoInstancesIsPlainGatedSelfAttention) {
  Rng rng = make_rng(16);
  auto w = EmbeddingInjectionWeights<double>::init(4, 3, 5, rng);
  w.gate[0] = 0.8;
  auto f = normal<double>({1, 4, 2, 3}, rng);
  auto out = embedding_injection_baseline(f, {}, RoiBoxBatch(1, 1), 0, w);
  auto n = layer_norm_rows(to_mat(map_to_tokens(f)));
  auto att = mm(attend(mm(n, to_mat(w.wq)), mm(n, to_mat(w.wk)), mm(n, to_mat(w.wv))), to_mat(w.wo));
  auto tokens = map_to_tokens(f);
  auto got = map_to_tokens(out);
  for (std::int64_t p = 0; p < 6; ++p)
    for (std::int64_t c = 0; c < 4; ++c)
      EXPECT_NEAR(got.at(p, c), tokens.at(p, c) + std::tanh(0.8) * att[p][c], 1e-9);
}

TEST(EmbeddingInjection, MatchesScalarLoopOracle) {
  Rng rng = make_rng(17);
  const std::int64_t c = 4, dt = 3;
  auto w = EmbeddingInjectionWeights<double>::init(c, dt, 5, rng);
  w.gate[0] = -0.4;
  fill_normal(w.b1, rng);
  fill_normal(w.b2, rng);
  auto f = normal<double>({1, c, 1, 1}, rng);
  auto cap = caption(2, dt, rng);
  const auto box = RoiBox::make(0.2, 0.1, 0.7, 0.6);
  auto out = embedding_injection_baseline(f, {cap}, RoiBoxBatch::from({box}), 0, w);

  std::vector<double> gin;
  for (std::int64_t j = 0; j < dt; ++j) gin.push_back((cap.tokens.at(0, j) + cap.tokens.at(1, j)) / 2);
  for (double coord : {box.x1, box.y1, box.x2, box.y2})
    for (int k = 0; k < kFourierFrequencies; ++k) {
      gin.push_back(std::sin(std::pow(2.0, k) * std::numbers::pi * coord));
      gin.push_back(std::cos(std::pow(2.0, k) * std::numbers::pi * coord));
    }
  auto hidden = mm(Mat{gin}, to_mat(w.mlp1));
  for (std::int64_t j = 0; j < c; ++j) {
    hidden[0][j] += w.b1[j];
    hidden[0][j] = hidden[0][j] / (1 + std::exp(-hidden[0][j]));
  }
  auto grounding = mm(hidden, to_mat(w.mlp2));
  for (std::int64_t j = 0; j < c; ++j) grounding[0][j] += w.b2[j];
  Mat seq{std::vector<double>(f.data(), f.data() + c), grounding[0]};
  auto n = layer_norm_rows(seq);
  auto att = mm(attend(mm(n, to_mat(w.wq)), mm(n, to_mat(w.wk)), mm(n, to_mat(w.wv))), to_mat(w.wo));
  for (std::int64_t j = 0; j < c; ++j) EXPECT_NEAR(out[j], f[j] + std::tanh(-0.4) * att[0][j], 1e-6);
}

TEST(EmbeddingInjection, VjpMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, 18);
    auto w = EmbeddingInjectionWeights<double>::init(3, 2, 4, rng);
    w.gate[0] = 0.5;
    auto f = normal<double>({1, 3, 2, 3}, rng);
    auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9), RoiBox::make(0.3, 0.1, 0.9, 0.7)});
    std::vector<CaptionEmbedding<double>> caps{caption(2, 2, rng), caption(2, 2, rng)};
    auto g = test::cotangent(f.shape(), rng);
    EmbeddingInjectionCache<double> cache;
    embedding_injection_baseline(f, caps, boxes, 0, w, &cache);
    auto gw = test::zeros_like_weights(w);
    auto gx = embedding_injection_baseline_vjp(cache, w, g, gw);
    auto rx = test::check_gradient(
        [&](const Tensor<double>& v) { return test::probe(embedding_injection_baseline(v, caps, boxes, 0, w), g); },
        f, gx);
    EXPECT_TRUE(rx.ok) << rx.detail;
    auto rw = test::check_weight_gradients(w, gw, [&](const EmbeddingInjectionWeights<double>& ww) {
      return test::probe(embedding_injection_baseline(f, caps, boxes, 0, ww), g);
    });
    EXPECT_TRUE(rw.ok) << rw.detail;
  }
}
