#pragma once

// Dense interpolation-matrix oracles for ROI-Align / ROI-Unpool.
//
// Written as plain scalar loops that do not call into roi_ops. The geometry
// convention (half-pixel centers, one sample per cell, edge clamping on align,
// renormalized partial stencils on unpool) is re-derived here with the same
// floating-point expression order, so at 64-bit the products S·x and U·y must
// match roi_align / roi_unpool bit for bit.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "roictrl/random.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl::oracle {

/// Row-major dense matrix.
struct DenseMatrix {
  std::int64_t rows = 0, cols = 0;
  std::vector<double> v;

  DenseMatrix(std::int64_t r, std::int64_t c)
      : rows(r), cols(c), v(static_cast<std::size_t>(r * c), 0.0) {}
  double& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
  double at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }

  /// y = M x, summing columns in ascending order.
  std::vector<double> apply(const std::vector<double>& x) const {
    std::vector<double> y(static_cast<std::size_t>(rows), 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) acc += at(r, c) * x[static_cast<std::size_t>(c)];
      y[static_cast<std::size_t>(r)] = acc;
    }
    return y;
  }
  /// x = Mᵀ y, summing rows in ascending order.
  std::vector<double> apply_transpose(const std::vector<double>& y) const {
    std::vector<double> x(static_cast<std::size_t>(cols), 0.0);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c)
        x[static_cast<std::size_t>(c)] += at(r, c) * y[static_cast<std::size_t>(r)];
    return x;
  }
};

struct OracleMatrices {
  DenseMatrix align;   ///< (b·n·c·r·r) x (b·c·h·w)
  DenseMatrix unpool;  ///< (b·n·c·h·w) x (b·n·c·r·r)
};

/// Largest matrix (entries) the oracle will build.
inline constexpr std::int64_t kOracleBudget = std::int64_t{1} << 24;

inline OracleMatrices dense_oracle_matrices(const RoiBoxBatch& boxes, std::int64_t channels,
                                            std::int64_t r, std::int64_t h, std::int64_t w) {
  if (r < 1 || h < 1 || w < 1 || channels < 1) throw ParameterError("oracle: extents must be >= 1");
  const std::int64_t nb = boxes.batch(), n = boxes.capacity(), c = channels;
  const std::int64_t roi_entries = nb * n * c * r * r;
  const std::int64_t map_entries = nb * c * h * w;
  const std::int64_t unpooled_entries = nb * n * c * h * w;
  if (roi_entries * map_entries > kOracleBudget || unpooled_entries * roi_entries > kOracleBudget) {
    throw ParameterError("oracle: shape budget exceeded (" + std::to_string(roi_entries) + " x " +
                         std::to_string(map_entries) + ")");
  }
  OracleMatrices m{DenseMatrix(roi_entries, map_entries), DenseMatrix(unpooled_entries, roi_entries)};

  for (std::int64_t b = 0; b < nb; ++b) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (!boxes.valid(b, i)) continue;
      const RoiBox& box = boxes.box(b, i);
      const double bx1 = box.x1 * static_cast<double>(w), bx2 = box.x2 * static_cast<double>(w);
      const double by1 = box.y1 * static_cast<double>(h), by2 = box.y2 * static_cast<double>(h);
      const double sx = (bx2 - bx1) / static_cast<double>(r);
      const double sy = (by2 - by1) / static_cast<double>(r);

      // Align: one bilinear sample at each cell center.
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t py = 0; py < r; ++py) {
          double v = by1 + (static_cast<double>(py) + 0.5) * sy - 0.5;
          if (v < 0.0) v = 0.0;
          if (v > static_cast<double>(h - 1)) v = static_cast<double>(h - 1);
          const auto y0 = static_cast<std::int64_t>(std::floor(v));
          const std::int64_t y1 = y0 + 1 < h ? y0 + 1 : h - 1;
          const double fy = v - static_cast<double>(y0);
          for (std::int64_t px = 0; px < r; ++px) {
            double u = bx1 + (static_cast<double>(px) + 0.5) * sx - 0.5;
            if (u < 0.0) u = 0.0;
            if (u > static_cast<double>(w - 1)) u = static_cast<double>(w - 1);
            const auto x0 = static_cast<std::int64_t>(std::floor(u));
            const std::int64_t x1 = x0 + 1 < w ? x0 + 1 : w - 1;
            const double fx = u - static_cast<double>(x0);
            const std::int64_t row = (((b * n + i) * c + ch) * r + py) * r + px;
            const std::int64_t base = (b * c + ch) * h * w;
            m.align.at(row, base + y0 * w + x0) += (1.0 - fy) * (1.0 - fx);
            m.align.at(row, base + y0 * w + x1) += (1.0 - fy) * fx;
            m.align.at(row, base + y1 * w + x0) += fy * (1.0 - fx);
            m.align.at(row, base + y1 * w + x1) += fy * fx;
          }
        }
      }

      // Unpool: every pixel center inside the footprint reads the lattice.
      for (std::int64_t y = 0; y < h; ++y) {
        const double cy = static_cast<double>(y) + 0.5;
        if (!(by1 <= cy && cy < by2)) continue;
        const double t = (cy - by1) / sy - 0.5;
        const auto ly0 = static_cast<std::int64_t>(std::floor(t));
        const double gy = t - static_cast<double>(ly0);
        for (std::int64_t x = 0; x < w; ++x) {
          const double cx = static_cast<double>(x) + 0.5;
          if (!(bx1 <= cx && cx < bx2)) continue;
          const double s = (cx - bx1) / sx - 0.5;
          const auto lx0 = static_cast<std::int64_t>(std::floor(s));
          const double gx = s - static_cast<double>(lx0);

          const std::int64_t ly[2] = {ly0, ly0 + 1};
          const std::int64_t lx[2] = {lx0, lx0 + 1};
          const double wy[2] = {1.0 - gy, gy};
          const double wx[2] = {1.0 - gx, gx};
          double norm = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int q = 0; q < 2; ++q)
              if (ly[a] >= 0 && ly[a] < r && lx[q] >= 0 && lx[q] < r) norm += wy[a] * wx[q];
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t row = (((b * n + i) * c + ch) * h + y) * w + x;
            for (int a = 0; a < 2; ++a)
              for (int q = 0; q < 2; ++q) {
                if (ly[a] < 0 || ly[a] >= r || lx[q] < 0 || lx[q] >= r) continue;
                const std::int64_t col = (((b * n + i) * c + ch) * r + ly[a]) * r + lx[q];
                m.unpool.at(row, col) += wy[a] * wx[q] / norm;
              }
          }
        }
      }
    }
  }
  return m;
}

inline std::vector<double> flatten(const Tensor<double>& t) {
  return {t.data(), t.data() + t.numel()};
}

/// Randomized small ROI problem: boxes (some touching the border, some
/// slots invalid), a feature map, an ROI stack and cotangents for both sides.
struct RoiCase {
  RoiBoxBatch boxes;
  std::int64_t c = 1, r = 1, h = 1, w = 1;
  Tensor<double> feature, roi, map_cotangent;
};

inline RoiCase random_roi_case(std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5201);
  std::uniform_int_distribution<std::int64_t> pick_b(1, 2), pick_n(1, 3), pick_c(1, 2), pick_r(1, 6),
      pick_hw(1, 12);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RoiCase rc;
  const std::int64_t nb = pick_b(rng), n = pick_n(rng);
  rc.c = pick_c(rng);
  rc.r = pick_r(rng);
  rc.h = pick_hw(rng);
  rc.w = pick_hw(rng);
  rc.boxes = RoiBoxBatch(nb, n);
  auto edge = [&](double& lo, double& hi) {
    lo = 0.9 * unit(rng);
    hi = lo + 0.05 + (1.0 - lo - 0.05) * unit(rng);
    if (unit(rng) < 0.2) lo = 0.0;
    if (unit(rng) < 0.2) hi = 1.0;
  };
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t i = 0; i < n; ++i) {
      RoiBox box;
      edge(box.x1, box.x2);
      edge(box.y1, box.y2);
      rc.boxes.set(b, i, box);
      if (n > 1 && unit(rng) < 0.25) rc.boxes.invalidate(b, i);
    }
  rc.feature = normal<double>({nb, rc.c, rc.h, rc.w}, rng);
  rc.roi = normal<double>({nb, n, rc.c, rc.r, rc.r}, rng);
  rc.map_cotangent = normal<double>({nb, n, rc.c, rc.h, rc.w}, rng);
  return rc;
}

}  // namespace roictrl::oracle
