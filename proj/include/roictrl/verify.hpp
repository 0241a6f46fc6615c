#pragma once

// Named property suite behind `roictrl verify`: dense-matrix oracles, finite
// differences, round trips, blend invariants and the matcher brute force.
// Every property runs at 64-bit and reports the first violation it finds.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "roictrl/attention.hpp"
#include "roictrl/blend.hpp"
#include "roictrl/diffusion.hpp"
#include "roictrl/eval.hpp"
#include "roictrl/gradcheck.hpp"
#include "roictrl/model.hpp"
#include "roictrl/ops.hpp"
#include "roictrl/oracle.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/scene.hpp"

namespace roictrl::verify {

/// A property returns an empty string on success, otherwise a description
/// of the first violation.
struct Property {
  std::string module, name;
  std::function<std::string()> run;
};

struct PropertyResult {
  std::string module, name;
  bool ok = false;
  std::string detail;
  double seconds = 0;
};

namespace detail {

inline std::string seed_tag(std::uint64_t seed) { return "seed " + std::to_string(seed) + ": "; }

inline std::string grad_fail(const gradcheck::GradCheck& g, std::uint64_t seed) {
  return g.ok ? std::string() : seed_tag(seed) + g.detail;
}

inline std::string first_mismatch(const std::vector<double>& got, const std::vector<double>& want,
                                  const std::string& what) {
  if (got.size() != want.size()) return what + ": size " + std::to_string(got.size()) + " vs " + std::to_string(want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i] != want[i]) {
      std::ostringstream os;
      os << what << ": entry " << i << " " << std::setprecision(17) << got[i] << " != " << want[i];
      return os.str();
    }
  }
  return {};
}

inline CaptionEmbedding<double> random_caption(std::int64_t len, std::int64_t dt, Rng& rng) {
  return {normal<double>({len, dt}, rng), std::nullopt};
}

inline RoiBoxBatch two_box_batch() {
  RoiBoxBatch b(2, 2);
  b.set(0, 0, RoiBox::make(0.1, 0.1, 0.6, 0.5));
  b.set(0, 1, RoiBox::make(0.4, 0.3, 0.9, 0.9));
  b.set(1, 0, RoiBox::make(0.0, 0.5, 0.5, 1.0));
  return b;
}

constexpr int kOracleCases = 50;
constexpr int kGradSeeds = 20;

// --- roi_ops ---------------------------------------------------------------

inline std::string align_oracle() {
  for (int seed = 0; seed < kOracleCases; ++seed) {
    auto rc = oracle::random_roi_case(seed);
    auto m = oracle::dense_oracle_matrices(rc.boxes, rc.c, rc.r, rc.h, rc.w);
    auto e = first_mismatch(oracle::flatten(roi_align(rc.feature, rc.boxes, rc.r)),
                            m.align.apply(oracle::flatten(rc.feature)), "roi_align vs S x");
    if (!e.empty()) return seed_tag(seed) + e;
  }
  return {};
}

inline std::string unpool_oracle() {
  for (int seed = 0; seed < kOracleCases; ++seed) {
    auto rc = oracle::random_roi_case(seed);
    auto m = oracle::dense_oracle_matrices(rc.boxes, rc.c, rc.r, rc.h, rc.w);
    auto e = first_mismatch(oracle::flatten(roi_unpool(rc.roi, rc.boxes, rc.h, rc.w).features),
                            m.unpool.apply(oracle::flatten(rc.roi)), "roi_unpool vs U y");
    if (!e.empty()) return seed_tag(seed) + e;
  }
  return {};
}

/// Both vjps equal the dense transposes exactly, and <S x, y> = <x, Sᵀ y>.
inline std::string adjointness() {
  for (int seed = 0; seed < kOracleCases; ++seed) {
    auto rc = oracle::random_roi_case(seed);
    auto m = oracle::dense_oracle_matrices(rc.boxes, rc.c, rc.r, rc.h, rc.w);
    auto e = first_mismatch(oracle::flatten(roi_align_vjp(rc.roi, rc.boxes, rc.h, rc.w)),
                            m.align.apply_transpose(oracle::flatten(rc.roi)), "roi_align_vjp vs S^T");
    if (e.empty())
      e = first_mismatch(oracle::flatten(roi_unpool_vjp(rc.map_cotangent, rc.boxes, rc.r)),
                         m.unpool.apply_transpose(oracle::flatten(rc.map_cotangent)), "roi_unpool_vjp vs U^T");
    if (!e.empty()) return seed_tag(seed) + e;
    const double al = gradcheck::probe(roi_align(rc.feature, rc.boxes, rc.r), rc.roi);
    const double ar = gradcheck::probe(rc.feature, roi_align_vjp(rc.roi, rc.boxes, rc.h, rc.w));
    const double ul = gradcheck::probe(roi_unpool(rc.roi, rc.boxes, rc.h, rc.w).features, rc.map_cotangent);
    const double ur = gradcheck::probe(rc.roi, roi_unpool_vjp(rc.map_cotangent, rc.boxes, rc.r));
    if (std::abs(al - ar) > 1e-12 * (1 + std::abs(al))) return seed_tag(seed) + "<Sx,y> != <x,S^T y>";
    if (std::abs(ul - ur) > 1e-12 * (1 + std::abs(ul))) return seed_tag(seed) + "<Uy,z> != <y,U^T z>";
  }
  return {};
}

inline std::string round_trip() {
  Rng rng = make_rng(2, 0x7217);
  for (std::int64_t s : {1, 2, 5, 8, 13}) {
    auto f = normal<double>({1, 3, s, s}, rng);
    auto boxes = RoiBoxBatch::from({RoiBox::make(0, 0, 1, 1)});
    auto back = roi_unpool(roi_align(f, boxes, s), boxes, s, s).features;
    auto e = first_mismatch(oracle::flatten(back), oracle::flatten(f), "unpool(align(x)) at side " + std::to_string(s));
    if (!e.empty()) return e;
  }
  return {};
}

inline std::string affine_reproduction() {
  Rng rng = make_rng(4, 0xAFF);
  std::uniform_real_distribution<double> unit(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t h = 24, w = 28, r = 7;
    const double a = unit(rng) - 0.5, b = unit(rng) - 0.5, c0 = unit(rng);
    Tensor<double> f({1, 1, h, w});
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) f.at(0, 0, y, x) = a * (x + 0.5) + b * (y + 0.5) + c0;
    const double x1 = 0.1 + 0.3 * unit(rng), y1 = 0.1 + 0.3 * unit(rng);
    const auto box = RoiBox::make(x1, y1, x1 + 0.3 + 0.15 * unit(rng), y1 + 0.3 + 0.15 * unit(rng));
    auto boxes = RoiBoxBatch::from({box});
    auto back = roi_unpool(roi_align(f, boxes, r), boxes, h, w).features;
    const double ex1 = box.x1 * w, ex2 = box.x2 * w, ey1 = box.y1 * h, ey2 = box.y2 * h;
    const double sx = (ex2 - ex1) / r, sy = (ey2 - ey1) / r;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double cx = x + 0.5, cy = y + 0.5;
        // interior: inside the hull of the sample lattice
        if (cx < ex1 + 0.5 * sx || cx > ex2 - 0.5 * sx || cy < ey1 + 0.5 * sy || cy > ey2 - 0.5 * sy) continue;
        if (std::abs(back.at(0, 0, 0, y, x) - f.at(0, 0, y, x)) > 1e-5) {
          return "trial " + std::to_string(trial) + ": pixel (" + std::to_string(y) + "," + std::to_string(x) +
                 ") off by " + std::to_string(std::abs(back.at(0, 0, 0, y, x) - f.at(0, 0, y, x)));
        }
      }
  }
  return {};
}

/// Edges placed at k + 0.4 px: the rounded mask misses the true edge by
/// 0.4 px, while roi-path occupancy follows the continuous predicate.
inline std::string quantization_band() {
  const std::int64_t h = 16, w = 20;
  for (std::int64_t k = 1; k + 6 < w; ++k) {
    const double ex1 = k + 0.4, ex2 = k + 5.4, ey1 = 2.4, ey2 = 9.4;
    const auto box = RoiBox::make(ex1 / w, ey1 / h, ex2 / w, ey2 / h);
    auto boxes = RoiBoxBatch::from({box});
    const auto q = quantize_box(box, h, w);
    const double dev = std::max({std::abs(q.x_lo - box.x1 * w), std::abs(q.x_hi - box.x2 * w),
                                 std::abs(q.y_lo - box.y1 * h), std::abs(q.y_hi - box.y2 * h)});
    if (dev < 0.4 - 1e-9) return "k=" + std::to_string(k) + ": mask edge deviation " + std::to_string(dev) + " < 0.4 px";
    auto mask = quantized_mask(boxes, h, w);
    auto occ = occupancy_mask<double>(boxes, h, w);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double cx = x + 0.5, cy = y + 0.5;
        const bool inside = box.x1 * w <= cx && cx < box.x2 * w && box.y1 * h <= cy && cy < box.y2 * h;
        if ((occ.at(0, 0, 0, y, x) != 0.0) != inside)
          return "k=" + std::to_string(k) + ": occupancy wrong at (" + std::to_string(y) + "," + std::to_string(x) + ")";
        const bool in_mask = x >= q.x_lo && x < q.x_hi && y >= q.y_lo && y < q.y_hi;
        if ((mask.at(0, 0, 0, y, x) != 0) != in_mask) return "k=" + std::to_string(k) + ": quantized mask not rounded box";
      }
  }
  return {};
}

/// Masked-attention output is nonzero exactly on the rounded footprint.
inline std::string mask_path_footprint() {
  Rng rng = make_rng(11, 0x3A5);
  auto wts = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  auto f = normal<double>({1, 4, 10, 10}, rng);
  std::vector<std::vector<CaptionEmbedding<double>>> caps{{random_caption(2, 3, rng)}};
  auto boxes = RoiBoxBatch::from({RoiBox::make(0.14, 0.24, 0.64, 0.94)});
  auto out = masked_instance_attention(f, caps, boxes, wts);
  auto mask = quantized_mask(boxes, 10, 10);
  for (std::int64_t y = 0; y < 10; ++y)
    for (std::int64_t x = 0; x < 10; ++x) {
      const bool nz = out.at(0, 0, 0, y, x) != 0.0;
      if (nz != (mask.at(0, 0, 0, y, x) != 0)) return "pixel (" + std::to_string(y) + "," + std::to_string(x) + ")";
    }
  return {};
}

// --- tensor_core -----------------------------------------------------------

inline std::string tensor_gradients() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 0x7E45);
    auto a = normal<double>({3, 4}, rng), b = normal<double>({4, 2}, rng);
    auto g = gradcheck::cotangent({3, 2}, rng);
    auto [ga, gb] = matmul_vjp(a, b, g);
    auto r = gradcheck::check_gradient([&](const Tensor<double>& x) { return gradcheck::probe(matmul(x, b), g); }, a, ga, "matmul a");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_gradient([&](const Tensor<double>& x) { return gradcheck::probe(matmul(a, x), g); }, b, gb, "matmul b");
    if (!r.ok) return grad_fail(r, seed);
    auto x = normal<double>({2, 4, 3}, rng);
    auto gx = gradcheck::cotangent(x.shape(), rng);
    for (int axis : {1, 2}) {
      r = gradcheck::check_gradient([&](const Tensor<double>& v) { return gradcheck::probe(softmax(v, axis), gx); }, x,
                                    softmax_vjp(softmax(x, axis), gx, axis), "softmax");
      if (!r.ok) return grad_fail(r, seed);
      r = gradcheck::check_gradient([&](const Tensor<double>& v) { return gradcheck::probe(layer_norm(v, axis), gx); },
                                    x, layer_norm_vjp(x, gx, axis), "layer_norm");
      if (!r.ok) return grad_fail(r, seed);
    }
    r = gradcheck::check_gradient([&](const Tensor<double>& v) { return gradcheck::probe(silu(v), gx); }, x,
                                  silu_vjp(x, gx), "silu");
    if (!r.ok) return grad_fail(r, seed);
  }
  return {};
}

inline std::string softmax_rows_sum_to_one() {
  Rng rng = make_rng(5, 0x50F7);
  auto x = normal<double>({6, 9}, rng, 4.0);
  auto y = softmax(x, 1);
  for (std::int64_t i = 0; i < 6; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < 9; ++j) s += y.at(i, j);
    if (std::abs(s - 1.0) > 1e-12) return "row " + std::to_string(i) + " sums to " + std::to_string(s);
  }
  return {};
}

// --- attention -------------------------------------------------------------

inline std::string cross_attention_gradients() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 10);
    auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
    auto q = normal<double>({5, 4}, rng);
    auto cap = random_caption(3, 3, rng);
    auto g = gradcheck::cotangent({5, 4}, rng);
    CrossAttentionCache<double> cache;
    cross_attention(q, cap, w, &cache);
    auto gw = gradcheck::zeros_like_weights(w);
    auto gi = cross_attention_vjp(cache, w, g, gw);
    auto r = gradcheck::check_gradient(
        [&](const Tensor<double>& v) { return gradcheck::probe(cross_attention(v, cap, w), g); }, q, gi.queries,
        "cross_attention queries");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_gradient(
        [&](const Tensor<double>& v) {
          return gradcheck::probe(cross_attention(q, CaptionEmbedding<double>{v, std::nullopt}, w), g);
        },
        cap.tokens, gi.caption, "cross_attention caption");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_weight_gradients(w, gw, [&](const CrossAttentionWeights<double>& ww) {
      return gradcheck::probe(cross_attention(q, cap, ww), g);
    });
    if (!r.ok) return grad_fail(r, seed);
  }
  return {};
}

inline std::string roi_self_attention_gradients() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 11);
    auto w = RoiSelfAttentionWeights<double>::init(2, 3, 4, rng);
    fill_normal(w.wo, rng);
    auto x = normal<double>({4, 3}, rng);
    auto g = gradcheck::cotangent({4, 3}, rng);
    RoiSelfAttentionCache<double> cache;
    roi_self_attention_tokens(x, w, &cache);
    auto gw = gradcheck::zeros_like_weights(w);
    auto gx = roi_self_attention_tokens_vjp(cache, w, g, gw);
    auto r = gradcheck::check_gradient(
        [&](const Tensor<double>& v) { return gradcheck::probe(roi_self_attention_tokens(v, w), g); }, x, gx,
        "roi_self_attention tokens");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_weight_gradients(w, gw, [&](const RoiSelfAttentionWeights<double>& ww) {
      return gradcheck::probe(roi_self_attention_tokens(x, ww), g);
    });
    if (!r.ok) return grad_fail(r, seed);
  }
  return {};
}

inline std::string box_guidance_gradients() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    for (auto frame : {CoordinateFrame::global, CoordinateFrame::local}) {
      Rng rng = make_rng(seed, 14);
      auto w = BoxGuidanceWeights<double>::init(3, 4, rng);
      w.gate[0] = 0.6;
      fill_normal(w.box_bias, rng, 0.1);
      auto f = normal<double>({1, 3, 3, 4}, rng);
      auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9), RoiBox::make(0.3, 0.1, 0.9, 0.7)});
      auto g = gradcheck::cotangent(f.shape(), rng);
      BoxGuidanceCache<double> cache;
      box_guidance(f, boxes, 0, w, frame, &cache);
      auto gw = gradcheck::zeros_like_weights(w);
      auto gx = box_guidance_vjp(cache, w, g, gw);
      auto r = gradcheck::check_gradient(
          [&](const Tensor<double>& v) { return gradcheck::probe(box_guidance(v, boxes, 0, w, frame), g); }, f, gx,
          "box_guidance input");
      if (!r.ok) return grad_fail(r, seed);
      r = gradcheck::check_weight_gradients(w, gw, [&](const BoxGuidanceWeights<double>& ww) {
        return gradcheck::probe(box_guidance(f, boxes, 0, ww, frame), g);
      });
      if (!r.ok) return grad_fail(r, seed);
    }
  }
  return {};
}

inline std::string embedding_injection_gradients() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 18);
    auto w = EmbeddingInjectionWeights<double>::init(3, 2, 4, rng);
    w.gate[0] = 0.5;
    auto f = normal<double>({1, 3, 2, 3}, rng);
    auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9), RoiBox::make(0.3, 0.1, 0.9, 0.7)});
    std::vector<CaptionEmbedding<double>> caps{random_caption(2, 2, rng), random_caption(2, 2, rng)};
    auto g = gradcheck::cotangent(f.shape(), rng);
    EmbeddingInjectionCache<double> cache;
    embedding_injection_baseline(f, caps, boxes, 0, w, &cache);
    auto gw = gradcheck::zeros_like_weights(w);
    auto gx = embedding_injection_baseline_vjp(cache, w, g, gw);
    auto r = gradcheck::check_gradient(
        [&](const Tensor<double>& v) {
          return gradcheck::probe(embedding_injection_baseline(v, caps, boxes, 0, w), g);
        },
        f, gx, "embedding_injection input");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_weight_gradients(w, gw, [&](const EmbeddingInjectionWeights<double>& ww) {
      return gradcheck::probe(embedding_injection_baseline(f, caps, boxes, 0, ww), g);
    });
    if (!r.ok) return grad_fail(r, seed);
  }
  return {};
}

inline std::string attention_rows_sum_to_one() {
  Rng rng = make_rng(5, 0xA77);
  auto w = CrossAttentionWeights<double>::init(4, 3, 5, rng);
  CrossAttentionCache<double> cache;
  cross_attention(normal<double>({7, 4}, rng, 3.0), random_caption(4, 3, rng), w, &cache);
  for (std::int64_t i = 0; i < 7; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < 4; ++j) s += cache.core.probs.at(i, j);
    if (std::abs(s - 1.0) > 1e-9) return "query " + std::to_string(i) + " weights sum to " + std::to_string(s);
  }
  return {};
}

/// Perturbing one instance's ROI tokens leaves every other instance bit-identical.
inline std::string instance_isolation() {
  Rng rng = make_rng(7, 0x150);
  auto w = RoiSelfAttentionWeights<double>::init(3, 4, 5, rng);
  fill_normal(w.wo, rng);
  auto stack = normal<double>({1, 3, 4, 3, 3}, rng);
  auto boxes = RoiBoxBatch::from({RoiBox{}, RoiBox{}, RoiBox{}});
  auto a = roi_self_attention(stack, boxes, w);
  auto perturbed = stack;
  for (std::int64_t k = 0; k < 36; ++k) perturbed[36 + k] += 1.0;
  auto b = roi_self_attention(perturbed, boxes, w);
  for (std::int64_t k = 0; k < 36; ++k)
    if (a[k] != b[k] || a[72 + k] != b[72 + k]) return "instance leak at cell " + std::to_string(k);
  if (max_abs_diff(a, b) == 0.0) return "perturbed instance unchanged";
  return {};
}

/// Zero-initialised gates and output projections leave the map unchanged.
inline std::string identity_at_init() {
  Rng rng = make_rng(6, 0x1D);
  auto sw = RoiSelfAttentionWeights<double>::init(3, 4, 5, rng);
  auto stack = normal<double>({1, 2, 4, 3, 3}, rng);
  if (!(roi_self_attention(stack, RoiBoxBatch::from({RoiBox{}, RoiBox{}}), sw) == stack))
    return "roi self-attention not identity at zero output projection";
  auto gw = BoxGuidanceWeights<double>::init(4, 5, rng);
  auto f = normal<double>({1, 4, 5, 6}, rng);
  auto boxes = RoiBoxBatch::from({RoiBox::make(0.1, 0.2, 0.5, 0.9)});
  for (auto frame : {CoordinateFrame::global, CoordinateFrame::local})
    if (!(box_guidance(f, boxes, 0, gw, frame) == f)) return "box guidance not identity at zero gate";
  return {};
}

// --- blend -----------------------------------------------------------------

struct BlendInputs {
  Tensor<double> global, instances, occupancy;
};

inline BlendInputs blend_inputs(Rng& rng, const RoiBoxBatch& boxes, std::int64_t c, std::int64_t h, std::int64_t w) {
  BlendInputs s;
  s.global = normal<double>({boxes.batch(), c, h, w}, rng);
  s.occupancy = occupancy_mask<double>(boxes, h, w);
  auto roi = normal<double>({boxes.batch(), boxes.capacity(), c, 3, 3}, rng);
  s.instances = roi_unpool(roi, boxes, h, w).features;
  return s;
}

inline std::string partition_of_unity() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 3);
    auto p = BlendParams<double>::init(3, rng);
    fill_normal(p.weight, rng, 3.0);
    fill_normal(p.bias, rng);
    auto boxes = two_box_batch();
    auto s = blend_inputs(rng, boxes, 3, 7, 9);
    auto res = learnable_blend(s.global, s.instances, s.occupancy, p);
    const std::int64_t hw = 63, slots = 3;
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t q = 0; q < hw; ++q) {
        double tot = 0;
        for (std::int64_t k = 0; k < slots; ++k) {
          const double wk = res.weights[(b * slots + k) * hw + q];
          if (k > 0 && s.occupancy[(b * 2 + k - 1) * hw + q] == 0 && wk != 0.0)
            return seed_tag(seed) + "weight on instance outside its footprint";
          tot += wk;
        }
        if (std::abs(tot - 1.0) > 1e-6) return seed_tag(seed) + "weights sum to " + std::to_string(tot);
      }
  }
  return {};
}

inline std::string outside_footprint_identity() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 0x0F7);
    auto p = BlendParams<double>::init(3, rng);
    fill_normal(p.weight, rng, 3.0);
    fill_normal(p.bias, rng);
    auto boxes = two_box_batch();
    auto s = blend_inputs(rng, boxes, 3, 7, 9);
    auto res = learnable_blend(s.global, s.instances, s.occupancy, p);
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t q = 0; q < 63; ++q) {
        bool covered = false;
        for (std::int64_t i = 0; i < 2; ++i) covered = covered || s.occupancy[(b * 2 + i) * 63 + q] != 0;
        if (covered) continue;
        for (std::int64_t ch = 0; ch < 3; ++ch)
          if (res.fused[(b * 3 + ch) * 63 + q] != s.global[(b * 3 + ch) * 63 + q])
            return seed_tag(seed) + "fused differs from global outside all footprints";
      }
  }
  return {};
}

/// L_reg is 0 when instances take all the weight inside the foreground and
/// 1 when the global path does.
inline std::string reg_endpoints() {
  auto boxes = RoiBoxBatch::from({RoiBox::make(0.25, 0.25, 0.75, 0.75)});
  auto occ = occupancy_mask<double>(boxes, 8, 8);
  Tensor<double> global({1, 1, 8, 8});
  Tensor<double> inst({1, 1, 1, 8, 8});
  for (std::int64_t q = 0; q < 64; ++q) inst[q] = occ[q];
  BlendParams<double> p{Tensor<double>({1, 1}, {2000.0}), Tensor<double>({1})};
  auto fg = foreground_mask(occ);
  const double lo = reg_loss(learnable_blend(global, inst, occ, p).weights, fg);
  p.weight[0] = -2000.0;
  const double hi = reg_loss(learnable_blend(global, inst, occ, p).weights, fg);
  if (lo != 0.0 || hi != 1.0) return "endpoints " + std::to_string(lo) + ", " + std::to_string(hi);
  return {};
}

inline std::string blend_gradients() {
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng = make_rng(seed, 4);
    auto p = BlendParams<double>::init(3, rng);
    fill_normal(p.weight, rng);
    fill_normal(p.bias, rng);
    auto boxes = two_box_batch();
    auto s = blend_inputs(rng, boxes, 3, 5, 6);
    auto gf = gradcheck::cotangent(s.global.shape(), rng);
    auto gwx = gradcheck::cotangent({2, 3, 1, 5, 6}, rng);
    auto fg = foreground_mask(s.occupancy);
    // probe of both outputs plus the regulariser on the weights
    auto loss = [&](const Tensor<double>& g, const Tensor<double>& inst, const BlendParams<double>& pp) {
      auto r = learnable_blend(g, inst, s.occupancy, pp);
      return gradcheck::probe(r.fused, gf) + gradcheck::probe(r.weights, gwx) + reg_loss(r.weights, fg);
    };
    BlendCache<double> cache;
    auto fwd = learnable_blend(s.global, s.instances, s.occupancy, p, &cache);
    auto gweights = reg_loss_vjp(fwd.weights, fg, 1.0);
    for (std::int64_t i = 0; i < gweights.numel(); ++i) gweights[i] += gwx[i];
    auto gp = gradcheck::zeros_like_weights(p);
    auto g = learnable_blend_vjp(cache, p, gf, &gweights, gp);
    auto r = gradcheck::check_gradient([&](const Tensor<double>& v) { return loss(v, s.instances, p); }, s.global,
                                       g.global, "blend global");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_gradient([&](const Tensor<double>& v) { return loss(s.global, v, p); }, s.instances,
                                  g.instances, "blend instances");
    if (!r.ok) return grad_fail(r, seed);
    r = gradcheck::check_weight_gradients(p, gp, [&](const BlendParams<double>& pp) {
      return loss(s.global, s.instances, pp);
    });
    if (!r.ok) return grad_fail(r, seed);
  }
  return {};
}

// --- diffusion_toy ---------------------------------------------------------

inline std::string roi_size_schedule() {
  const std::int64_t sides[] = {64, 32, 16, 8}, want[] = {25, 19, 13, 7};
  for (int k = 0; k < 4; ++k)
    if (roi_size(sides[k]) != want[k])
      return "R=" + std::to_string(sides[k]) + " gives " + std::to_string(roi_size(sides[k]));
  return {};
}

/// DDIM with the true noise as predictor recovers x0 from any timestep.
inline std::string ddim_oracle_recovery() {
  const auto s = NoiseSchedule::linear();
  Rng rng = make_rng(2, 0xDD1);
  auto x0 = uniform<double>({1, 3, 8, 8}, rng, -1, 1);
  auto eps = normal<double>(x0.shape(), rng);
  NoisePredictor<double> oracle_eps = [&](const Tensor<double>&, int) { return eps; };
  for (int steps : {1, 10, 50}) {
    auto out = ddim_sample_from(q_sample(x0, 999, eps, s), oracle_eps, s, steps, false);
    if (max_abs_diff(out, x0) > 1e-5) return std::to_string(steps) + " steps: error " + std::to_string(max_abs_diff(out, x0));
  }
  return {};
}

inline ModelConfig probe_config() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.c_hi = 4;
  cfg.c_lo = 6;
  cfg.text_dim = 5;
  cfg.temb_dim = 8;
  return cfg;
}

/// Two random entries of every parameter tensor against central differences
/// of the total loss, for the default graph and each ablation.
inline std::string model_gradients() {
  LayoutOptions lo;
  lo.height = lo.width = 8;
  lo.min_instances = 1;
  lo.max_instances = 3;
  lo.min_side = 2;
  lo.max_side = 6;
  for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    for (int variant = 0; variant < 3; ++variant) {
      if (variant > 0 && seed >= 5) break;
      auto cfg = probe_config();
      if (variant == 1) cfg.self_attention = false;
      if (variant == 2) cfg.frame = CoordinateFrame::local;
      ToyModel<double> model(cfg, seed);
      Rng rng = make_rng(seed, 77);
      model.weights.visit("", [&](const std::string&, Tensor<double>& t) {
        for (auto& v : t.values()) v += 0.05 * std::normal_distribution<double>()(rng);
      });
      const auto scene = synth_scene(seed, lo);
      const auto sched = cfg.schedule();
      const int t = std::uniform_int_distribution<int>(0, cfg.timesteps - 1)(rng);
      const auto eps = normal<double>({1, 3, 8, 8}, rng);
      const double alpha = 0.5;
      auto grads = model.zero_grads();
      ldm_loss(model, scene, t, eps, sched, alpha, &grads);
      auto total = [&] {
        const auto l = ldm_loss(model, scene, t, eps, sched, alpha);
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
          (*params[k])[i] = orig + gradcheck::kFdStep;
          const double fp = total();
          (*params[k])[i] = orig - gradcheck::kFdStep;
          const double fm = total();
          (*params[k])[i] = orig;
          const double num = (fp - fm) / (2 * gradcheck::kFdStep), ana = (*gparams[k])[i];
          if (std::abs(ana - num) > gradcheck::kFdRtol * std::abs(num) + gradcheck::kFdAtol) {
            std::ostringstream os;
            os << "seed " << seed << " variant " << variant << ": " << names[k] << "[" << i << "] analytic " << ana
               << " numeric " << num;
            return os.str();
          }
        }
      }
    }
  }
  return {};
}

// --- eval ------------------------------------------------------------------

inline double brute_force_best(const std::vector<double>& m, int rows, int cols) {
  const bool tall = rows > cols;
  const int small = tall ? cols : rows, large = tall ? rows : cols;
  std::vector<int> idx(static_cast<std::size_t>(large));
  std::iota(idx.begin(), idx.end(), 0);
  double best = 0;
  do {
    double tot = 0;
    for (int k = 0; k < small; ++k) {
      const int i = tall ? idx[static_cast<std::size_t>(k)] : k, j = tall ? k : idx[static_cast<std::size_t>(k)];
      tot += m[static_cast<std::size_t>(i * cols + j)];
    }
    best = std::max(best, tot);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return best;
}

inline std::string hungarian_bruteforce() {
  Rng rng = make_rng(6, 0x4A6);
  std::uniform_int_distribution<int> side(1, 6);
  std::uniform_real_distribution<double> u(0, 1);
  std::bernoulli_distribution zero(0.3);
  for (int k = 0; k < 1000; ++k) {
    const int rows = side(rng), cols = side(rng);
    std::vector<double> m(static_cast<std::size_t>(rows * cols));
    for (auto& v : m) v = zero(rng) ? 0.0 : u(rng);
    auto res = hungarian_match(m, rows, cols);
    const double best = brute_force_best(m, rows, cols);
    if (std::abs(res.total - best) > 1e-12)
      return "case " + std::to_string(k) + " (" + std::to_string(rows) + "x" + std::to_string(cols) + "): " +
             std::to_string(res.total) + " vs " + std::to_string(best);
    std::vector<int> rs, cs;
    for (auto [i, j] : res.pairs) {
      rs.push_back(i);
      cs.push_back(j);
    }
    std::sort(rs.begin(), rs.end());
    std::sort(cs.begin(), cs.end());
    if (std::adjacent_find(rs.begin(), rs.end()) != rs.end() || std::adjacent_find(cs.begin(), cs.end()) != cs.end())
      return "case " + std::to_string(k) + ": repeated index";
  }
  return {};
}

/// Ground-truth renders are scored as perfect by the detector pipeline.
inline std::string detector_roundtrip() {
  LayoutOptions o;
  o.min_instances = 1;
  o.allow_overlap = false;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto s = synth_scene(seed, o);
    auto outcomes = score_scene(s, s.image);
    for (std::size_t i = 0; i < outcomes.size(); ++i)
      if (outcomes[i].iou < 0.9 || !outcomes[i].color_ok || !outcomes[i].shape_ok)
        return "seed " + std::to_string(seed) + ": " + s.layout.instances[i].describe();
  }
  return {};
}

}  // namespace detail

inline std::vector<Property> all_properties() {
  using namespace detail;
  return {
      {"tensor_core", "op-gradients", tensor_gradients},
      {"tensor_core", "softmax-normalised", softmax_rows_sum_to_one},
      {"roi_ops", "align-oracle", align_oracle},
      {"roi_ops", "unpool-oracle", unpool_oracle},
      {"roi_ops", "adjointness", adjointness},
      {"roi_ops", "round-trip", round_trip},
      {"roi_ops", "affine-reproduction", affine_reproduction},
      {"roi_ops", "quantization-band", quantization_band},
      {"attention", "mask-path-footprint", mask_path_footprint},
      {"attention", "cross-attention-gradients", cross_attention_gradients},
      {"attention", "roi-self-attention-gradients", roi_self_attention_gradients},
      {"attention", "box-guidance-gradients", box_guidance_gradients},
      {"attention", "embedding-injection-gradients", embedding_injection_gradients},
      {"attention", "attention-rows-sum-to-one", attention_rows_sum_to_one},
      {"attention", "instance-isolation", instance_isolation},
      {"attention", "identity-at-init", identity_at_init},
      {"blend", "partition-of-unity", partition_of_unity},
      {"blend", "outside-footprint-identity", outside_footprint_identity},
      {"blend", "reg-endpoints", reg_endpoints},
      {"blend", "blend-gradients", blend_gradients},
      {"diffusion_toy", "roi-size-schedule", roi_size_schedule},
      {"diffusion_toy", "ddim-oracle-recovery", ddim_oracle_recovery},
      {"diffusion_toy", "model-gradients", model_gradients},
      {"eval", "hungarian-bruteforce", hungarian_bruteforce},
      {"eval", "detector-roundtrip", detector_roundtrip},
  };
}

/// Module prefix ("roi" matches roi_ops) or exact property name; empty
/// selects everything. Comma-separated alternatives are allowed.
inline bool matches_filter(const Property& p, const std::string& filter) {
  if (filter.empty()) return true;
  std::stringstream ss(filter);
  std::string term;
  while (std::getline(ss, term, ',')) {
    if (term.empty()) continue;
    if (p.module.rfind(term, 0) == 0 || p.name == term) return true;
  }
  return false;
}

inline PropertyResult run_property(const Property& p) {
  PropertyResult r{p.module, p.name, false, {}, 0};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    r.detail = p.run();
    r.ok = r.detail.empty();
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Throws ParameterError when the filter selects nothing.
inline std::vector<PropertyResult> run_verification(const std::string& filter = "",
                                                    const std::function<void(const PropertyResult&)>& each = {}) {
  std::vector<PropertyResult> out;
  for (const auto& p : all_properties()) {
    if (!matches_filter(p, filter)) continue;
    out.push_back(run_property(p));
    if (each) each(out.back());
  }
  if (out.empty()) throw ParameterError("verify: filter '" + filter + "' selects no property");
  return out;
}

inline void print_result_row(std::ostream& os, const PropertyResult& r) {
  os << std::left << std::setw(6) << (r.ok ? "PASS" : "FAIL") << std::setw(15) << r.module << std::setw(32) << r.name
     << std::right << std::fixed << std::setprecision(3) << std::setw(8) << r.seconds << " s";
  if (!r.ok) os << "  " << r.detail;
  os << '\n';
  os.unsetf(std::ios::fixed);
}

inline bool all_passed(const std::vector<PropertyResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const PropertyResult& r) { return r.ok; });
}

}  // namespace roictrl::verify
