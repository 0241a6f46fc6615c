#pragma once

// ROI-Align and ROI-Unpool.
//
// Geometry convention (shared by every consumer, including the dense oracle):
//   * a box is given in normalized image coordinates; on an h x w map its
//     footprint spans [x1*w, x2*w) x [y1*h, y2*h) in continuous pixel units;
//   * pixel (i, j) has its center at (j + 0.5, i + 0.5);
//   * ROI cell k (of r along an axis) samples the footprint at
//     e1 + (k + 0.5) * step, step = (e2 - e1) / r, exactly one sample per cell.
// Align reads the map bilinearly at those sample points (index coordinate
// = continuous coordinate - 0.5, clamped to the map). Unpool inverts the
// mapping: a pixel center inside the footprint lands at lattice coordinate
// (X - e1) / step - 0.5 and is interpolated from the available lattice
// neighbours, renormalized where fewer than four exist.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "roictrl/parallel.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

/// Axis-aligned box in normalized global-frame coordinates.
struct RoiBox {
  double x1 = 0, y1 = 0, x2 = 1, y2 = 1;

  static RoiBox make(double x1, double y1, double x2, double y2) {
    RoiBox b{x1, y1, x2, y2};
    b.validate();
    return b;
  }
  void validate() const {
    if (!(0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0)) {
      throw ParameterError("invalid RoiBox [" + std::to_string(x1) + "," + std::to_string(y1) +
                           "," + std::to_string(x2) + "," + std::to_string(y2) + "]");
    }
  }
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool operator==(const RoiBox&) const = default;
};

/// Fixed-capacity box slots per batch element. Capacity is at least one so
/// that derived tensors keep extents >= 1; scenes with no instances carry a
/// single invalid slot.
class RoiBoxBatch {
 public:
  RoiBoxBatch() : RoiBoxBatch(1, 1) {}
  RoiBoxBatch(std::int64_t batch, std::int64_t capacity)
      : batch_(batch), capacity_(std::max<std::int64_t>(capacity, 1)),
        boxes_(static_cast<std::size_t>(batch_ * capacity_)),
        valid_(static_cast<std::size_t>(batch_ * capacity_), 0) {
    if (batch < 1) throw ParameterError("RoiBoxBatch: batch must be >= 1");
  }

  /// Single batch element holding `boxes`, all valid.
  static RoiBoxBatch from(const std::vector<RoiBox>& boxes) {
    RoiBoxBatch out(1, static_cast<std::int64_t>(boxes.size()));
    for (std::size_t i = 0; i < boxes.size(); ++i) out.set(0, static_cast<std::int64_t>(i), boxes[i]);
    return out;
  }

  std::int64_t batch() const { return batch_; }
  std::int64_t capacity() const { return capacity_; }

  void set(std::int64_t b, std::int64_t i, const RoiBox& box) {
    box.validate();
    boxes_[index(b, i)] = box;
    valid_[index(b, i)] = 1;
  }
  void invalidate(std::int64_t b, std::int64_t i) { valid_[index(b, i)] = 0; }
  const RoiBox& box(std::int64_t b, std::int64_t i) const { return boxes_[index(b, i)]; }
  bool valid(std::int64_t b, std::int64_t i) const { return valid_[index(b, i)] != 0; }
  std::int64_t valid_count(std::int64_t b) const {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < capacity_; ++i) n += valid(b, i) ? 1 : 0;
    return n;
  }

 private:
  std::size_t index(std::int64_t b, std::int64_t i) const {
    if (b < 0 || b >= batch_ || i < 0 || i >= capacity_) {
      throw ParameterError("RoiBoxBatch slot (" + std::to_string(b) + "," + std::to_string(i) +
                           ") out of range");
    }
    return static_cast<std::size_t>(b * capacity_ + i);
  }

  std::int64_t batch_, capacity_;
  std::vector<RoiBox> boxes_;
  std::vector<std::uint8_t> valid_;
};

namespace testing {
/// Mutation hook for the verification suite: flips the sign of the unpool
/// backward weights so the adjointness check must fail.
inline std::atomic<bool>& unpool_vjp_sign_flip() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace testing

namespace detail {

/// Two-point linear interpolation stencil along one axis.
struct AxisTap {
  std::int64_t lo = 0, hi = 0;
  double w_lo = 0, w_hi = 0;
};

/// Align sample k of r along an axis of `size` pixels spanning [e1, e2).
inline AxisTap align_tap(double e1, double e2, std::int64_t r, std::int64_t k, std::int64_t size) {
  const double step = (e2 - e1) / static_cast<double>(r);
  const double center = e1 + (static_cast<double>(k) + 0.5) * step;
  const double u = std::clamp(center - 0.5, 0.0, static_cast<double>(size - 1));
  AxisTap t;
  t.lo = static_cast<std::int64_t>(std::floor(u));
  t.hi = std::min(t.lo + 1, size - 1);
  const double f = u - static_cast<double>(t.lo);
  t.w_lo = 1.0 - f;
  t.w_hi = f;
  return t;
}

inline bool center_inside(std::int64_t px, double e1, double e2) {
  const double c = static_cast<double>(px) + 0.5;
  return e1 <= c && c < e2;
}

/// Lattice stencil for pixel `px` (center inside [e1, e2)) against r samples.
/// lo/hi may fall outside [0, r); availability is checked by the caller.
inline AxisTap unpool_tap(double e1, double e2, std::int64_t r, std::int64_t px) {
  const double step = (e2 - e1) / static_cast<double>(r);
  const double s = (static_cast<double>(px) + 0.5 - e1) / step - 0.5;
  AxisTap t;
  t.lo = static_cast<std::int64_t>(std::floor(s));
  t.hi = t.lo + 1;
  const double f = s - static_cast<double>(t.lo);
  t.w_lo = 1.0 - f;
  t.w_hi = f;
  return t;
}

/// Up to four (lattice offset, weight) pairs for one unpooled pixel, in
/// ascending lattice order, renormalized over the available neighbours.
struct UnpoolStencil {
  std::array<std::int64_t, 4> cell{};
  std::array<double, 4> weight{};
  int count = 0;
};

inline UnpoolStencil unpool_stencil(const AxisTap& ty, const AxisTap& tx, std::int64_t r) {
  UnpoolStencil st;
  const std::array<std::pair<std::int64_t, double>, 2> ys{{{ty.lo, ty.w_lo}, {ty.hi, ty.w_hi}}};
  const std::array<std::pair<std::int64_t, double>, 2> xs{{{tx.lo, tx.w_lo}, {tx.hi, tx.w_hi}}};
  double total = 0.0;
  for (const auto& [y, wy] : ys) {
    if (y < 0 || y >= r) continue;
    for (const auto& [x, wx] : xs) {
      if (x < 0 || x >= r) continue;
      st.cell[static_cast<std::size_t>(st.count)] = y * r + x;
      st.weight[static_cast<std::size_t>(st.count)] = wy * wx;
      total += wy * wx;
      ++st.count;
    }
  }
  // Under the half-pixel convention each axis keeps a neighbour of weight >= 0.5.
  if (!(total > 0.0)) throw ParameterError("roi_unpool: empty interpolation stencil");
  for (int k = 0; k < st.count; ++k) st.weight[static_cast<std::size_t>(k)] /= total;
  return st;
}

struct Footprint {
  double x1, x2, y1, y2;
};
inline Footprint footprint(const RoiBox& b, std::int64_t h, std::int64_t w) {
  return {b.x1 * static_cast<double>(w), b.x2 * static_cast<double>(w),
          b.y1 * static_cast<double>(h), b.y2 * static_cast<double>(h)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// roi_align: [b, c, h, w] -> [b, n, c, r, r]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> roi_align(const Tensor<T>& feature, const RoiBoxBatch& boxes, std::int64_t r) {
  if (r < 1) throw ParameterError("roi_align: ROI side must be >= 1");
  if (feature.rank() != 4 || feature.extent(0) != boxes.batch()) {
    throw DimensionError("roi_align: feature " + feature.shape().str() +
                         " does not match box batch " + std::to_string(boxes.batch()));
  }
  const std::int64_t nb = feature.extent(0), c = feature.extent(1), h = feature.extent(2),
                     w = feature.extent(3), n = boxes.capacity();
  Tensor<T> out({nb, n, c, r, r});
  parallel_for(nb * n, [&](std::int64_t job) {
    const std::int64_t b = job / n, i = job % n;
    if (!boxes.valid(b, i)) return;
    const auto fp = detail::footprint(boxes.box(b, i), h, w);
    std::vector<detail::AxisTap> ty(static_cast<std::size_t>(r)), tx(static_cast<std::size_t>(r));
    for (std::int64_t k = 0; k < r; ++k) {
      ty[static_cast<std::size_t>(k)] = detail::align_tap(fp.y1, fp.y2, r, k, h);
      tx[static_cast<std::size_t>(k)] = detail::align_tap(fp.x1, fp.x2, r, k, w);
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* src = feature.data() + (b * c + ch) * h * w;
      T* dst = out.data() + ((b * n + i) * c + ch) * r * r;
      for (std::int64_t py = 0; py < r; ++py) {
        const auto& yt = ty[static_cast<std::size_t>(py)];
        for (std::int64_t px = 0; px < r; ++px) {
          const auto& xt = tx[static_cast<std::size_t>(px)];
          T acc = 0;
          acc += static_cast<T>(yt.w_lo * xt.w_lo) * src[yt.lo * w + xt.lo];
          acc += static_cast<T>(yt.w_lo * xt.w_hi) * src[yt.lo * w + xt.hi];
          acc += static_cast<T>(yt.w_hi * xt.w_lo) * src[yt.hi * w + xt.lo];
          acc += static_cast<T>(yt.w_hi * xt.w_hi) * src[yt.hi * w + xt.hi];
          dst[py * r + px] = acc;
        }
      }
    }
  });
  return out;
}

/// Scatters ROI gradients back onto the feature map through the same
/// bilinear weights. Accumulation runs in (instance, cell) order per batch
/// element, so it is deterministic for any thread count.
template <class T>
Tensor<T> roi_align_vjp(const Tensor<T>& grad_roi, const RoiBoxBatch& boxes, std::int64_t h,
                        std::int64_t w) {
  const std::int64_t nb = grad_roi.extent(0), n = grad_roi.extent(1), c = grad_roi.extent(2),
                     r = grad_roi.extent(3);
  Tensor<T> gx({nb, c, h, w});
  parallel_for(nb, [&](std::int64_t b) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (!boxes.valid(b, i)) continue;
      const auto fp = detail::footprint(boxes.box(b, i), h, w);
      std::vector<detail::AxisTap> ty(static_cast<std::size_t>(r)), tx(static_cast<std::size_t>(r));
      for (std::int64_t k = 0; k < r; ++k) {
        ty[static_cast<std::size_t>(k)] = detail::align_tap(fp.y1, fp.y2, r, k, h);
        tx[static_cast<std::size_t>(k)] = detail::align_tap(fp.x1, fp.x2, r, k, w);
      }
      for (std::int64_t ch = 0; ch < c; ++ch) {
        T* dst = gx.data() + (b * c + ch) * h * w;
        const T* g = grad_roi.data() + ((b * n + i) * c + ch) * r * r;
        for (std::int64_t py = 0; py < r; ++py) {
          const auto& yt = ty[static_cast<std::size_t>(py)];
          for (std::int64_t px = 0; px < r; ++px) {
            const auto& xt = tx[static_cast<std::size_t>(px)];
            const T gv = g[py * r + px];
            dst[yt.lo * w + xt.lo] += static_cast<T>(yt.w_lo * xt.w_lo) * gv;
            dst[yt.lo * w + xt.hi] += static_cast<T>(yt.w_lo * xt.w_hi) * gv;
            dst[yt.hi * w + xt.lo] += static_cast<T>(yt.w_hi * xt.w_lo) * gv;
            dst[yt.hi * w + xt.hi] += static_cast<T>(yt.w_hi * xt.w_hi) * gv;
          }
        }
      }
    }
  });
  return gx;
}

// ---------------------------------------------------------------------------
// roi_unpool: [b, n, c, r, r] -> [b, n, c, h, w] plus occupancy [b, n, 1, h, w]
// ---------------------------------------------------------------------------

template <class T>
struct UnpoolResult {
  Tensor<T> features;   ///< per-instance maps, zero outside each footprint
  Tensor<T> occupancy;  ///< 1 where the pixel center lies inside the footprint
};

/// Continuous footprint membership of pixel centers, [b, n, 1, h, w].
template <class T>
Tensor<T> occupancy_mask(const RoiBoxBatch& boxes, std::int64_t h, std::int64_t w) {
  if (h < 1 || w < 1) throw ParameterError("occupancy_mask: h and w must be >= 1");
  const std::int64_t nb = boxes.batch(), n = boxes.capacity();
  Tensor<T> occ({nb, n, 1, h, w});
  for (std::int64_t b = 0; b < nb; ++b) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (!boxes.valid(b, i)) continue;
      const auto fp = detail::footprint(boxes.box(b, i), h, w);
      T* o = occ.data() + (b * n + i) * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        if (!detail::center_inside(y, fp.y1, fp.y2)) continue;
        for (std::int64_t x = 0; x < w; ++x)
          if (detail::center_inside(x, fp.x1, fp.x2)) o[y * w + x] = T{1};
      }
    }
  }
  return occ;
}

namespace detail {

/// Calls fn(pixel_offset, stencil) for each pixel center inside the footprint.
template <class Fn>
void for_each_unpool_pixel(const RoiBox& box, std::int64_t r, std::int64_t h, std::int64_t w,
                           Fn&& fn) {
  const auto fp = footprint(box, h, w);
  std::vector<AxisTap> tx(static_cast<std::size_t>(w));
  std::vector<std::uint8_t> xin(static_cast<std::size_t>(w), 0);
  for (std::int64_t x = 0; x < w; ++x) {
    if (!center_inside(x, fp.x1, fp.x2)) continue;
    xin[static_cast<std::size_t>(x)] = 1;
    tx[static_cast<std::size_t>(x)] = unpool_tap(fp.x1, fp.x2, r, x);
  }
  for (std::int64_t y = 0; y < h; ++y) {
    if (!center_inside(y, fp.y1, fp.y2)) continue;
    const AxisTap ty = unpool_tap(fp.y1, fp.y2, r, y);
    for (std::int64_t x = 0; x < w; ++x) {
      if (!xin[static_cast<std::size_t>(x)]) continue;
      fn(y * w + x, unpool_stencil(ty, tx[static_cast<std::size_t>(x)], r));
    }
  }
}

}  // namespace detail

template <class T>
UnpoolResult<T> roi_unpool(const Tensor<T>& roi, const RoiBoxBatch& boxes, std::int64_t h,
                           std::int64_t w) {
  if (h < 1 || w < 1) throw ParameterError("roi_unpool: h and w must be >= 1");
  if (roi.rank() != 5 || roi.extent(0) != boxes.batch() || roi.extent(1) != boxes.capacity() ||
      roi.extent(3) != roi.extent(4)) {
    throw DimensionError("roi_unpool: ROI stack " + roi.shape().str() +
                         " inconsistent with box batch");
  }
  const std::int64_t nb = roi.extent(0), n = roi.extent(1), c = roi.extent(2), r = roi.extent(3);
  UnpoolResult<T> res{Tensor<T>({nb, n, c, h, w}), occupancy_mask<T>(boxes, h, w)};
  parallel_for(nb * n, [&](std::int64_t job) {
    const std::int64_t b = job / n, i = job % n;
    if (!boxes.valid(b, i)) return;
    const T* src = roi.data() + (b * n + i) * c * r * r;
    T* dst = res.features.data() + (b * n + i) * c * h * w;
    detail::for_each_unpool_pixel(boxes.box(b, i), r, h, w,
                                  [&](std::int64_t p, const detail::UnpoolStencil& st) {
                                    for (std::int64_t ch = 0; ch < c; ++ch) {
                                      const T* s = src + ch * r * r;
                                      T acc = 0;
                                      for (int k = 0; k < st.count; ++k)
                                        acc += static_cast<T>(st.weight[static_cast<std::size_t>(k)]) *
                                               s[st.cell[static_cast<std::size_t>(k)]];
                                      dst[ch * h * w + p] = acc;
                                    }
                                  });
  });
  return res;
}

/// Gradient of roi_unpool with respect to the ROI stack.
template <class T>
Tensor<T> roi_unpool_vjp(const Tensor<T>& grad_maps, const RoiBoxBatch& boxes, std::int64_t r) {
  const std::int64_t nb = grad_maps.extent(0), n = grad_maps.extent(1), c = grad_maps.extent(2),
                     h = grad_maps.extent(3), w = grad_maps.extent(4);
  Tensor<T> groi({nb, n, c, r, r});
  const double sign = testing::unpool_vjp_sign_flip().load() ? -1.0 : 1.0;
  parallel_for(nb * n, [&](std::int64_t job) {
    const std::int64_t b = job / n, i = job % n;
    if (!boxes.valid(b, i)) return;
    const T* g = grad_maps.data() + (b * n + i) * c * h * w;
    T* dst = groi.data() + (b * n + i) * c * r * r;
    detail::for_each_unpool_pixel(boxes.box(b, i), r, h, w,
                                  [&](std::int64_t p, const detail::UnpoolStencil& st) {
                                    for (std::int64_t ch = 0; ch < c; ++ch) {
                                      const T gv = g[ch * h * w + p];
                                      T* d = dst + ch * r * r;
                                      for (int k = 0; k < st.count; ++k)
                                        d[st.cell[static_cast<std::size_t>(k)]] +=
                                            static_cast<T>(sign * st.weight[static_cast<std::size_t>(k)]) * gv;
                                    }
                                  });
  });
  return groi;
}

// ---------------------------------------------------------------------------
// Quantized masks (masked-attention baseline)
// ---------------------------------------------------------------------------

/// Pixel edges of a box after rounding to the nearest integer, [lo, hi).
struct QuantizedEdges {
  std::int64_t x_lo, x_hi, y_lo, y_hi;
};

inline QuantizedEdges quantize_box(const RoiBox& b, std::int64_t h, std::int64_t w) {
  const auto fp = detail::footprint(b, h, w);
  return {std::lround(fp.x1), std::lround(fp.x2), std::lround(fp.y1), std::lround(fp.y2)};
}

/// Boolean [b, n, 1, h, w] mask with box edges rounded to whole pixels.
inline Mask quantized_mask(const RoiBoxBatch& boxes, std::int64_t h, std::int64_t w) {
  const std::int64_t nb = boxes.batch(), n = boxes.capacity();
  Mask m({nb, n, 1, h, w});
  for (std::int64_t b = 0; b < nb; ++b) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (!boxes.valid(b, i)) continue;
      const auto q = quantize_box(boxes.box(b, i), h, w);
      std::uint8_t* o = m.data() + (b * n + i) * h * w;
      for (std::int64_t y = std::max<std::int64_t>(q.y_lo, 0); y < std::min(q.y_hi, h); ++y)
        for (std::int64_t x = std::max<std::int64_t>(q.x_lo, 0); x < std::min(q.x_hi, w); ++x)
          o[y * w + x] = 1;
    }
  }
  return m;
}

}  // namespace roictrl
