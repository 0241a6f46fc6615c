#pragma once

// Cost comparison of the two instance-injection paths: analytic FLOPs,
// median wall-clock and peak transient allocation.
//
// FLOP model (multiply-add = 2, softmax = 3 per score; d = c, caption width = c):
//   query-side attention for nq queries over L tokens
//     A(nq) = 2·nq·c·d (q proj) + 2·nq·L·d (scores) + 3·nq·L (softmax)
//           + 2·nq·L·d (P·V) + 2·nq·d·c (out proj)
//   caption projection per caption          K = 4·L·c·d
//   global term (both paths)                A(h·w) + K
//   mask path, per instance                 A(h·w) + K, masking h·w·c
//   roi path, per instance                  A(r²) + K
//     ROI self-attention                    r²·c (pos) + 8·r²·c (LN) + 6·r²·c·d
//                                           + 4·r⁴·d + 3·r⁴ + 2·r²·d·c + r²·c
//     align / unpool                        8·r²·c + 8·c·(footprint pixels)
// Only the unpool scatter depends on (h, w) in the roi path.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "roictrl/attention.hpp"
#include "roictrl/parallel.hpp"
#include "roictrl/random.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

enum class InjectionPath { mask, roi };

inline const char* path_name(InjectionPath p) { return p == InjectionPath::mask ? "mask" : "roi"; }

struct BenchConfig {
  std::int64_t h = 64, w = 64, r = 25, n = 25, c = 32, L = 4;
};

struct FlopBreakdown {
  double global = 0;          ///< global cross-attention incl. its caption projection
  double instance_attention = 0;  ///< query-side instance cross-attention
  double caption = 0;         ///< instance caption projections
  double refine = 0;          ///< ROI self-attention (roi path only)
  double resample = 0;        ///< align + unpool, or mask application

  double instance() const { return instance_attention + caption + refine + resample; }
  double total() const { return global + instance(); }
};

namespace detail {

inline double query_attention_flops(double nq, double L, double c) {
  const double d = c;
  return 2 * nq * c * d + 2 * nq * L * d + 3 * nq * L + 2 * nq * L * d + 2 * nq * d * c;
}

inline void require_positive(const BenchConfig& g) {
  if (g.h < 1 || g.w < 1 || g.r < 1 || g.c < 1 || g.L < 1 || g.n < 0) {
    throw ParameterError("flop_model: extents must be positive");
  }
}

}  // namespace detail

/// `footprint_px` is the summed pixel area of the n box footprints; it only
/// enters the roi path's unpool term.
inline FlopBreakdown flop_model(InjectionPath path, const BenchConfig& g, double footprint_px = 0) {
  detail::require_positive(g);
  const double hw = double(g.h) * double(g.w), r2 = double(g.r) * double(g.r), c = double(g.c), L = double(g.L),
               n = double(g.n), d = c;
  FlopBreakdown f;
  const double kv = 4 * L * c * d;
  f.global = detail::query_attention_flops(hw, L, c) + kv;
  f.caption = n * kv;
  if (path == InjectionPath::mask) {
    f.instance_attention = n * detail::query_attention_flops(hw, L, c);
    f.resample = n * hw * c;
  } else {
    f.instance_attention = n * detail::query_attention_flops(r2, L, c);
    f.refine = n * (r2 * c + 8 * r2 * c + 6 * r2 * c * d + 4 * r2 * r2 * d + 3 * r2 * r2 + 2 * r2 * d * c + r2 * c);
    f.resample = n * 8 * r2 * c + 8 * c * footprint_px;
  }
  return f;
}

struct CostReport {
  InjectionPath path = InjectionPath::roi;
  BenchConfig config;
  FlopBreakdown flops;
  double ns_median = 0;
  std::int64_t bytes_peak = 0;
  int runs = 0;
  int threads = 1;
  std::string skipped;  ///< non-empty when the config was not executed
};

struct BenchOptions {
  std::vector<BenchConfig> grid;
  std::uint64_t seed = 0;
  int warmup = 2;
  int runs = 5;
  int threads = 1;  ///< >1 runs instances in parallel; reports carry the count
  std::int64_t byte_budget = std::int64_t{2} << 30;
  double box_min = 0.15, box_max = 0.35;  ///< box side as a fraction of the canvas
};

/// h=w ∈ {32, 64, 128, 256} with n = 25, r = 25.
inline std::vector<BenchConfig> default_bench_grid() {
  std::vector<BenchConfig> g;
  for (std::int64_t s : {32, 64, 128, 256}) g.push_back({s, s, 25, 25, 32, 4});
  return g;
}

/// Dominant buffers of a path: the [n, c, h, w] instance maps plus a few
/// full-size feature copies.
inline std::int64_t estimated_bytes(const BenchConfig& g) {
  return static_cast<std::int64_t>(sizeof(float)) * g.c * g.h * g.w * (g.n + 6);
}

struct BenchInputs {
  Tensor<float> feature;
  RoiBoxBatch boxes;
  CaptionEmbedding<float> global;
  std::vector<CaptionEmbedding<float>> captions;
  CrossAttentionWeights<float> cross;
  RoiSelfAttentionWeights<float> self_attn;
};

inline BenchInputs bench_inputs(const BenchConfig& g, const BenchOptions& o) {
  Rng rng = make_rng(o.seed, 0xB3C4);
  BenchInputs in;
  in.feature = normal<float>({1, g.c, g.h, g.w}, rng);
  in.boxes = RoiBoxBatch(1, g.n);
  std::uniform_real_distribution<double> side(o.box_min, o.box_max), unit(0.0, 1.0);
  for (std::int64_t i = 0; i < g.n; ++i) {
    const double bw = side(rng), bh = side(rng);
    const double x1 = unit(rng) * (1 - bw), y1 = unit(rng) * (1 - bh);
    in.boxes.set(0, i, RoiBox::make(x1, y1, std::min(1.0, x1 + bw), std::min(1.0, y1 + bh)));
  }
  in.global.tokens = normal<float>({g.L, g.c}, rng);
  for (std::int64_t i = 0; i < g.n; ++i) in.captions.push_back({normal<float>({g.L, g.c}, rng), i});
  in.cross = CrossAttentionWeights<float>::init(g.c, g.c, g.c, rng);
  in.self_attn = RoiSelfAttentionWeights<float>::init(g.r, g.c, g.c, rng);
  // a non-zero output projection so the refinement is not skipped numerically
  in.self_attn.wo = normal<float>({g.c, g.c}, rng, 0.1);
  return in;
}

inline double footprint_pixels(const RoiBoxBatch& boxes, std::int64_t h, std::int64_t w) {
  double total = 0;
  for (std::int64_t i = 0; i < boxes.capacity(); ++i) {
    if (!boxes.valid(0, i)) continue;
    const auto& b = boxes.box(0, i);
    total += b.width() * double(w) * b.height() * double(h);
  }
  return total;
}

/// Global attention plus masked per-instance attention; returns the
/// [1, n, c, h, w] instance maps.
inline Tensor<float> run_mask_path(const BenchInputs& in) {
  const Tensor<float> global = cross_attention(map_to_tokens(in.feature), in.global, in.cross);
  return masked_instance_attention(in.feature, {in.captions}, in.boxes, in.cross);
}

/// Global attention, then align, per-instance cross-attention and ROI
/// self-attention on the r×r lattice, then unpool.
inline Tensor<float> run_roi_path(const BenchInputs& in, std::int64_t r) {
  const Tensor<float> global = cross_attention(map_to_tokens(in.feature), in.global, in.cross);
  Tensor<float> stack = roi_align(in.feature, in.boxes, r);
  const std::int64_t n = stack.extent(1), c = stack.extent(2);
  parallel_for(n, [&](std::int64_t i) {
    float* slot = stack.data() + i * c * r * r;
    const Tensor<float> tokens = transpose_last2(Tensor<float>({c, r * r}, std::span<const float>(slot, c * r * r)));
    Tensor<float> refined = cross_attention(tokens, in.captions[static_cast<std::size_t>(i)], in.cross);
    refined = transpose_last2(roi_self_attention_tokens(refined, in.self_attn));
    std::copy_n(refined.data(), c * r * r, slot);
  });
  return roi_unpool(stack, in.boxes, in.feature.extent(2), in.feature.extent(3)).features;
}

inline CostReport measure_path(InjectionPath path, const BenchConfig& g, const BenchInputs& in,
                               const BenchOptions& o) {
  CostReport rep;
  rep.path = path;
  rep.config = g;
  rep.threads = o.threads;
  rep.flops = flop_model(path, g, footprint_pixels(in.boxes, g.h, g.w));
  auto once = [&] {
    if (path == InjectionPath::mask) return run_mask_path(in);
    return run_roi_path(in, g.r);
  };
  for (int k = 0; k < o.warmup; ++k) once();
  std::vector<double> ns;
  std::int64_t peak = 0;
  for (int k = 0; k < o.runs; ++k) {
    const std::int64_t base = AllocationStats::live_bytes();
    AllocationStats::reset_peak();
    const auto t0 = std::chrono::steady_clock::now();
    {
      const Tensor<float> out = once();
      (void)out;
    }
    const auto t1 = std::chrono::steady_clock::now();
    peak = std::max(peak, AllocationStats::peak_bytes() - base);
    ns.push_back(double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  std::sort(ns.begin(), ns.end());
  const std::size_t m = ns.size() / 2;
  rep.ns_median = ns.size() % 2 == 1 ? ns[m] : 0.5 * (ns[m - 1] + ns[m]);
  rep.bytes_peak = peak;
  rep.runs = o.runs;
  return rep;
}

/// Both paths on identical inputs for every grid entry. Outputs are not
/// compared: the mask path quantizes box edges by construction.
inline std::vector<CostReport> run_bench(const BenchOptions& o) {
  if (o.runs < 5) throw ParameterError("run_bench: at least 5 timed runs are required");
  const int saved_threads = num_threads();
  set_num_threads(o.threads);
  std::vector<CostReport> out;
  for (const auto& g : o.grid) {
    detail::require_positive(g);
    if (estimated_bytes(g) > o.byte_budget) {
      for (auto p : {InjectionPath::roi, InjectionPath::mask}) {
        CostReport rep;
        rep.path = p;
        rep.config = g;
        rep.threads = o.threads;
        rep.flops = flop_model(p, g);
        rep.skipped = "estimated " + std::to_string(estimated_bytes(g)) + " bytes exceeds budget " +
                      std::to_string(o.byte_budget);
        out.push_back(rep);
      }
      continue;
    }
    const BenchInputs in = bench_inputs(g, o);
    out.push_back(measure_path(InjectionPath::roi, g, in, o));
    out.push_back(measure_path(InjectionPath::mask, g, in, o));
  }
  set_num_threads(saved_threads);
  return out;
}

/// Required columns first; the breakdown and run metadata follow.
inline void write_bench_csv(std::ostream& os, const std::vector<CostReport>& reports) {
  os << "path,h,w,r,n,c,L,flops_analytic,ns_median,bytes_peak,flops_instance_attention,flops_refine,"
        "flops_resample,threads,runs,skipped\n";
  for (const auto& r : reports) {
    const auto& g = r.config;
    os << path_name(r.path) << ',' << g.h << ',' << g.w << ',' << g.r << ',' << g.n << ',' << g.c << ',' << g.L
       << ',' << std::setprecision(17) << r.flops.total() << ',' << std::setprecision(12) << r.ns_median << ','
       << r.bytes_peak << ',' << std::setprecision(17) << r.flops.instance_attention << ',' << r.flops.refine << ','
       << r.flops.resample << ',' << r.threads << ',' << r.runs << ',' << r.skipped << '\n';
  }
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ParameterError("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rk(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) rk[idx[k]] = 0.5 * double(i + j);
      i = j + 1;
    }
    return rk;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace roictrl
