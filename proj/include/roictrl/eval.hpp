#pragma once

// Evaluation on generated scenes: a rule-based detector for the synthetic
// palette, IoU, optimal bipartite matching and the benchmark metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "roictrl/roi_ops.hpp"
#include "roictrl/scene.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

struct Detection {
  RoiBox box;
  int color = 0;
  ShapeKind shape = ShapeKind::square;
  double confidence = 0.0;
};

struct DetectorOptions {
  std::int64_t min_area = 8;        ///< components smaller than this are noise
  double square_fill = 0.88;        ///< fill ratio at or above which a blob is a square
  double triangle_balance = 0.6;    ///< top/bottom half fill below which a blob is a triangle
};

/// Per-pixel nearest palette entry: color id, or -1 for a background color.
template <class T>
std::vector<int> classify_pixels(const Tensor<T>& image, std::vector<double>* dist2 = nullptr) {
  const std::int64_t h = image.extent(-2), w = image.extent(-1), hw = h * w;
  std::vector<int> label(static_cast<std::size_t>(hw));
  if (dist2 != nullptr) dist2->assign(static_cast<std::size_t>(hw), 0.0);
  for (std::int64_t p = 0; p < hw; ++p) {
    const double r = static_cast<double>(image[p]), g = static_cast<double>(image[hw + p]),
                 b = static_cast<double>(image[2 * hw + p]);
    auto d2 = [&](const Rgb& c) { return (r - c.r) * (r - c.r) + (g - c.g) * (g - c.g) + (b - c.b) * (b - c.b); };
    double best = std::numeric_limits<double>::infinity();
    int best_id = -1;
    for (int k = 0; k < kNumColors; ++k) {
      const double d = d2(kPalette[static_cast<std::size_t>(k)]);
      if (d < best) {
        best = d;
        best_id = k;
      }
    }
    for (const auto& bg : kBackgrounds) {
      const double d = d2(bg);
      if (d < best) {
        best = d;
        best_id = -1;
      }
    }
    label[static_cast<std::size_t>(p)] = best_id;
    if (dist2 != nullptr) (*dist2)[static_cast<std::size_t>(p)] = best;
  }
  return label;
}

/// Shape from a component's pixel mask inside its bounding box.
inline ShapeKind classify_shape(const std::vector<std::uint8_t>& mask, std::int64_t bw, std::int64_t bh,
                                const DetectorOptions& o = {}) {
  std::int64_t area = 0, top = 0, bottom = 0;
  for (std::int64_t y = 0; y < bh; ++y)
    for (std::int64_t x = 0; x < bw; ++x) {
      if (!mask[static_cast<std::size_t>(y * bw + x)]) continue;
      ++area;
      if (2 * y + 1 < bh) ++top;
      if (2 * y + 1 > bh) ++bottom;
    }
  const double fill = static_cast<double>(area) / static_cast<double>(bw * bh);
  auto at = [&](std::int64_t y, std::int64_t x) { return mask[static_cast<std::size_t>(y * bw + x)] != 0; };
  const bool corners = at(0, 0) && at(0, bw - 1) && at(bh - 1, 0) && at(bh - 1, bw - 1);
  if (fill >= o.square_fill && corners) return ShapeKind::square;
  if (bottom > 0 && static_cast<double>(top) / static_cast<double>(bottom) < o.triangle_balance) return ShapeKind::triangle;
  return ShapeKind::circle;
}

/// Connected components (4-neighbourhood) of each palette color.
/// `image` is [3, H, W] or [1, 3, H, W] in [-1, 1].
template <class T>
std::vector<Detection> detect(const Tensor<T>& image, const DetectorOptions& o = {}) {
  const std::int64_t h = image.extent(-2), w = image.extent(-1);
  std::vector<double> dist2;
  const auto label = classify_pixels(image, &dist2);
  std::vector<std::uint8_t> seen(label.size(), 0);
  std::vector<Detection> out;
  std::vector<std::int64_t> pixels;
  for (std::int64_t start = 0; start < h * w; ++start) {
    const int color = label[static_cast<std::size_t>(start)];
    if (color < 0 || seen[static_cast<std::size_t>(start)]) continue;
    pixels.clear();
    std::queue<std::int64_t> q;
    q.push(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!q.empty()) {
      const std::int64_t p = q.front();
      q.pop();
      pixels.push_back(p);
      const std::int64_t y = p / w, x = p % w;
      const std::int64_t nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& nb : nbr) {
        if (nb[0] < 0 || nb[0] >= h || nb[1] < 0 || nb[1] >= w) continue;
        const std::int64_t np = nb[0] * w + nb[1];
        if (seen[static_cast<std::size_t>(np)] || label[static_cast<std::size_t>(np)] != color) continue;
        seen[static_cast<std::size_t>(np)] = 1;
        q.push(np);
      }
    }
    if (static_cast<std::int64_t>(pixels.size()) < o.min_area) continue;
    std::int64_t x0 = w, y0 = h, x1 = 0, y1 = 0;
    double err = 0;
    for (auto p : pixels) {
      x0 = std::min(x0, p % w);
      x1 = std::max(x1, p % w + 1);
      y0 = std::min(y0, p / w);
      y1 = std::max(y1, p / w + 1);
      err += dist2[static_cast<std::size_t>(p)];
    }
    const std::int64_t bw = x1 - x0, bh = y1 - y0;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(bw * bh), 0);
    for (auto p : pixels) mask[static_cast<std::size_t>((p / w - y0) * bw + (p % w - x0))] = 1;
    Detection d;
    d.box = RoiBox::make(static_cast<double>(x0) / static_cast<double>(w), static_cast<double>(y0) / static_cast<double>(h),
                         static_cast<double>(x1) / static_cast<double>(w), static_cast<double>(y1) / static_cast<double>(h));
    d.color = color;
    d.shape = classify_shape(mask, bw, bh, o);
    d.confidence = std::exp(-err / static_cast<double>(pixels.size()));
    out.push_back(d);
  }
  return out;
}

inline double iou(const RoiBox& a, const RoiBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  ///< (row, column), rows ascending
  std::vector<int> unmatched_rows, unmatched_cols;
  double total = 0.0;
};

/// Assignment maximizing the total score of a rows x cols matrix (row-major).
/// Pairs whose score is 0 are dropped after the assignment.
inline MatchResult hungarian_match(const std::vector<double>& score, int rows, int cols) {
  MatchResult res;
  const int n = std::max(rows, cols);
  if (n == 0) return res;
  // Square minimisation problem on cost = max - score, padded with max.
  double top = 0;
  for (double s : score) top = std::max(top, s);
  auto cost = [&](int i, int j) {
    return (i < rows && j < cols) ? top - score[static_cast<std::size_t>(i * cols + j)] : top;
  };
  // Potentials formulation (1-based, column 0 is a sentinel).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0), v(static_cast<std::size_t>(n + 1), 0);
  std::vector<int> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(rows), -1);
  for (int j = 1; j <= n; ++j) {
    const int i = p[static_cast<std::size_t>(j)] - 1;
    if (i < rows && j - 1 < cols && score[static_cast<std::size_t>(i * cols + j - 1)] > 0)
      row_to_col[static_cast<std::size_t>(i)] = j - 1;
  }
  std::vector<char> col_used(static_cast<std::size_t>(cols), 0);
  for (int i = 0; i < rows; ++i) {
    const int j = row_to_col[static_cast<std::size_t>(i)];
    if (j < 0) {
      res.unmatched_rows.push_back(i);
      continue;
    }
    res.pairs.emplace_back(i, j);
    col_used[static_cast<std::size_t>(j)] = 1;
    res.total += score[static_cast<std::size_t>(i * cols + j)];
  }
  for (int j = 0; j < cols; ++j)
    if (!col_used[static_cast<std::size_t>(j)]) res.unmatched_cols.push_back(j);
  return res;
}

// ---------------------------------------------------------------------------
// Benchmark metrics
// ---------------------------------------------------------------------------

/// Minimum visible fraction for an instance's attributes to be scored.
inline constexpr double kMinVisibility = 0.5;

struct InstanceOutcome {
  int n_instances = 0;
  bool small = false;
  double iou = 0.0;
  bool matched = false, scored = false, color_ok = false, shape_ok = false;
};

struct MetricRow {
  std::string n_instances = "all", size_bucket = "all";
  std::int64_t count = 0;
  double miou = 0, acc_color = 0, acc_shape = 0, success_rate = 0;
};

struct BenchMetrics {
  std::vector<InstanceOutcome> outcomes;
  std::vector<MetricRow> rows;  ///< rows[0] is the overall row

  const MetricRow& overall() const { return rows.front(); }
};

/// Per-instance outcomes for one scene and one generated image.
template <class T>
std::vector<InstanceOutcome> score_scene(const ToyScene& scene, const Tensor<T>& generated, const DetectorOptions& o = {}) {
  const auto dets = detect(generated, o);
  const auto& inst = scene.layout.instances;
  const int rows = static_cast<int>(inst.size()), cols = static_cast<int>(dets.size());
  std::vector<double> m(static_cast<std::size_t>(rows * cols));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      m[static_cast<std::size_t>(i * cols + j)] = iou(inst[static_cast<std::size_t>(i)].box, dets[static_cast<std::size_t>(j)].box);
  const auto match = hungarian_match(m, rows, cols);
  const double small_area = std::pow(static_cast<double>(scene.layout.height) / 8.0, 2);
  std::vector<InstanceOutcome> out(inst.size());
  for (int i = 0; i < rows; ++i) {
    auto& r = out[static_cast<std::size_t>(i)];
    const auto& b = inst[static_cast<std::size_t>(i)].box;
    r.n_instances = rows;
    r.small = b.width() * static_cast<double>(scene.layout.width) * b.height() * static_cast<double>(scene.layout.height) < small_area;
    r.scored = scene.visibility[static_cast<std::size_t>(i)] >= kMinVisibility;
  }
  for (auto [i, j] : match.pairs) {
    auto& r = out[static_cast<std::size_t>(i)];
    const auto& d = dets[static_cast<std::size_t>(j)];
    r.matched = true;
    r.iou = m[static_cast<std::size_t>(i * cols + j)];
    r.color_ok = d.color == inst[static_cast<std::size_t>(i)].color;
    r.shape_ok = d.shape == inst[static_cast<std::size_t>(i)].shape;
  }
  return out;
}

inline MetricRow summarize(const std::vector<InstanceOutcome>& outcomes, std::string n_label, std::string size_label) {
  MetricRow row{std::move(n_label), std::move(size_label)};
  std::int64_t attr = 0, color = 0, shape = 0, success = 0;
  double iou_sum = 0;
  for (const auto& r : outcomes) {
    ++row.count;
    iou_sum += r.iou;
    if (r.matched && r.scored) {
      ++attr;
      color += r.color_ok;
      shape += r.shape_ok;
    }
    const bool located = r.matched && r.iou >= 0.5;
    if (located && (!r.scored || (r.color_ok && r.shape_ok))) ++success;
  }
  if (row.count > 0) {
    row.miou = iou_sum / static_cast<double>(row.count);
    row.success_rate = static_cast<double>(success) / static_cast<double>(row.count);
  }
  if (attr > 0) {
    row.acc_color = static_cast<double>(color) / static_cast<double>(attr);
    row.acc_shape = static_cast<double>(shape) / static_cast<double>(attr);
  }
  return row;
}

inline BenchMetrics aggregate(std::vector<InstanceOutcome> outcomes) {
  BenchMetrics m;
  m.outcomes = std::move(outcomes);
  m.rows.push_back(summarize(m.outcomes, "all", "all"));
  std::map<int, std::vector<InstanceOutcome>> by_n;
  std::vector<InstanceOutcome> small, large;
  for (const auto& r : m.outcomes) {
    by_n[r.n_instances].push_back(r);
    (r.small ? small : large).push_back(r);
  }
  for (const auto& [n, rs] : by_n) m.rows.push_back(summarize(rs, std::to_string(n), "all"));
  m.rows.push_back(summarize(small, "all", "small"));
  m.rows.push_back(summarize(large, "all", "large"));
  return m;
}

template <class T>
BenchMetrics bench_metrics(const std::vector<ToyScene>& scenes, const std::vector<Tensor<T>>& generated,
                           const DetectorOptions& o = {}) {
  if (scenes.size() != generated.size()) {
    throw DimensionError("bench_metrics: " + std::to_string(scenes.size()) + " scenes but " +
                         std::to_string(generated.size()) + " images");
  }
  std::vector<InstanceOutcome> all;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    auto s = score_scene(scenes[k], generated[k], o);
    all.insert(all.end(), s.begin(), s.end());
  }
  return aggregate(std::move(all));
}

inline void write_metrics_csv(std::ostream& os, const std::string& track, const BenchMetrics& m, bool header = true) {
  if (header) os << "track,n_instances,size_bucket,mIoU,acc_color,acc_shape,success_rate\n";
  for (const auto& r : m.rows) {
    os << track << ',' << r.n_instances << ',' << r.size_bucket << ',' << r.miou << ',' << r.acc_color << ','
       << r.acc_shape << ',' << r.success_rate << '\n';
  }
}

}  // namespace roictrl
