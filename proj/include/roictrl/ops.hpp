#pragma once

// Dense tensor arithmetic with hand-written vector-Jacobian products.
//
// Every differentiable op `f` comes with `f_vjp(saved inputs..., grad_out)`
// returning gradients shaped like the inputs. Ops are pure.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "roictrl/tensor.hpp"

namespace roictrl {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// C(MxN) (+)= op(A) * op(B), all row-major. op(A) is MxK, op(B) is KxN.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  MapMat<T> cm(c, m, n);
  const CMapMat<T> am(a, trans_a ? k : m, trans_a ? m : k);
  const CMapMat<T> bm(b, trans_b ? n : k, trans_b ? k : n);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::int64_t outer, n, inner;
};
inline AxisSplit split_axis(const Shape& s, int axis) {
  const int a = s.normalize(axis);
  return {s.span_numel(0, a), s[a], s.span_numel(a + 1, s.rank())};
}

/// Right-aligned numpy-style broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int rank = std::max(a.rank(), b.rank());
  Shape out;
  for (int i = 0; i < rank; ++i) {
    const int ia = i - (rank - a.rank());
    const int ib = i - (rank - b.rank());
    const std::int64_t ea = ia >= 0 ? a[ia] : 1;
    const std::int64_t eb = ib >= 0 ? b[ib] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + a.str() + " with " + b.str());
    }
    out.push_back(std::max(ea, eb));
  }
  return out;
}

/// Strides of `s` viewed inside broadcast shape `out` (0 on broadcast axes).
inline std::array<std::int64_t, Shape::kMaxRank> broadcast_strides(const Shape& s, const Shape& out) {
  std::array<std::int64_t, Shape::kMaxRank> st{};
  std::int64_t stride = 1;
  for (int i = out.rank() - 1; i >= 0; --i) {
    const int is = i - (out.rank() - s.rank());
    if (is >= 0) {
      st[static_cast<std::size_t>(i)] = s[is] == 1 ? 0 : stride;
      stride *= s[is];
    }
  }
  return st;
}

/// Visits every element of `out` with the matching offsets into a and b.
template <class Fn>
void broadcast_visit(const Shape& a, const Shape& b, const Shape& out, Fn&& fn) {
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const int rank = out.rank();
  const std::int64_t inner = out[rank - 1];
  const std::int64_t ia_step = sa[static_cast<std::size_t>(rank - 1)];
  const std::int64_t ib_step = sb[static_cast<std::size_t>(rank - 1)];
  std::array<std::int64_t, Shape::kMaxRank> idx{};
  const std::int64_t rows = out.numel() / inner;
  std::int64_t o = 0;
  for (std::int64_t row = 0; row < rows; ++row) {
    std::int64_t oa = 0, ob = 0;
    for (int d = 0; d < rank - 1; ++d) {
      oa += idx[static_cast<std::size_t>(d)] * sa[static_cast<std::size_t>(d)];
      ob += idx[static_cast<std::size_t>(d)] * sb[static_cast<std::size_t>(d)];
    }
    for (std::int64_t j = 0; j < inner; ++j, ++o) fn(o, oa + j * ia_step, ob + j * ib_step);
    for (int d = rank - 2; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < out[d]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
}

/// Sums `g` (broadcast shape) back down to `target` shape.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<T> out(target);
  broadcast_visit(target, target, g.shape(),
                  [&](std::int64_t o, std::int64_t it, std::int64_t) { out[it] += g[o]; });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Batched matrix product over leading extents. `b` may be rank 2, in which
/// case it is shared by every batch entry of `a`.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + a.shape().str() + " and " +
                         b.shape().str());
  }
  const std::int64_t m = a.extent(-2), k = a.extent(-1);
  const std::int64_t kb = b.extent(-2), n = b.extent(-1);
  const std::int64_t batch = a.shape().span_numel(0, a.rank() - 2);
  const bool shared_b = b.rank() == 2;
  const bool batch_ok =
      shared_b || (b.rank() == a.rank() &&
                   std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()));
  if (k != kb || !batch_ok) {
    throw DimensionError("matmul: incompatible shapes " + a.shape().str() + " x " +
                         b.shape().str());
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::gemm<T>(false, false, m, n, k, a.data() + i * m * k,
                    b.data() + (shared_b ? 0 : i * k * n), out.data() + i * m * n, false);
  }
  return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> matmul_vjp(const Tensor<T>& a, const Tensor<T>& b,
                                           const Tensor<T>& gy) {
  const std::int64_t m = a.extent(-2), k = a.extent(-1), n = b.extent(-1);
  const std::int64_t batch = a.shape().span_numel(0, a.rank() - 2);
  const bool shared_b = b.rank() == 2;
  Tensor<T> ga(a.shape()), gb(b.shape());
  for (std::int64_t i = 0; i < batch; ++i) {
    const T* g = gy.data() + i * m * n;
    detail::gemm<T>(false, true, m, k, n, g, b.data() + (shared_b ? 0 : i * k * n),
                    ga.data() + i * m * k, false);
    detail::gemm<T>(true, false, k, n, m, a.data() + i * m * k, g,
                    gb.data() + (shared_b ? 0 : i * k * n), shared_b);
  }
  return {std::move(ga), std::move(gb)};
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  const std::int64_t m = x.extent(-2), n = x.extent(-1);
  const std::int64_t batch = x.shape().span_numel(0, x.rank() - 2);
  Shape s(x.shape().begin(), x.shape().end() - 2);
  s.push_back(n);
  s.push_back(m);
  Tensor<T> out(s);
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* src = x.data() + b * m * n;
    T* dst = out.data() + b * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear layer on token rows: y = x·W (+ b)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (x.rank() != 2 || weight.rank() != 2 || x.extent(1) != weight.extent(0)) {
    throw DimensionError("linear: incompatible shapes " + x.shape().str() + " x " +
                         weight.shape().str());
  }
  const std::int64_t rows = x.extent(0), cin = x.extent(1), cout = weight.extent(1);
  Tensor<T> y({rows, cout});
  detail::gemm<T>(false, false, rows, cout, cin, x.data(), weight.data(), y.data(), false);
  if (bias != nullptr) {
    if (bias->numel() != cout) throw DimensionError("linear: bias width mismatch");
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cout; ++c) y[r * cout + c] += (*bias)[c];
  }
  return y;
}

/// Accumulates weight/bias gradients into gw/gb and returns the input gradient.
template <class T>
Tensor<T> linear_vjp(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy,
                     Tensor<T>& gw, Tensor<T>* gb = nullptr) {
  const std::int64_t rows = x.extent(0), cin = x.extent(1), cout = weight.extent(1);
  Tensor<T> gx({rows, cin});
  detail::gemm<T>(false, true, rows, cin, cout, gy.data(), weight.data(), gx.data(), false);
  detail::gemm<T>(true, false, cin, cout, rows, x.data(), gy.data(), gw.data(), true);
  if (gb != nullptr) {
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cout; ++c) (*gb)[c] += gy[r * cout + c];
  }
  return gx;
}

// ---------------------------------------------------------------------------
// softmax (optionally masked)
// ---------------------------------------------------------------------------

/// Softmax along `axis`. Where `mask` (broadcastable to x) is 0 the logit is
/// treated as masked_logit() and the output is exactly 0. Every slice must keep
/// at least one unmasked entry.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis, const Mask* mask = nullptr) {
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  std::vector<std::uint8_t> keep;
  if (mask != nullptr) {
    if (!(detail::broadcast_shape(x.shape(), mask->shape()) == x.shape())) {
      throw DimensionError("softmax: mask " + mask->shape().str() + " not broadcastable to " +
                           x.shape().str());
    }
    keep.resize(static_cast<std::size_t>(x.numel()));
    detail::broadcast_visit(x.shape(), mask->shape(), x.shape(),
                            [&](std::int64_t o, std::int64_t, std::int64_t im) {
                              keep[static_cast<std::size_t>(o)] = (*mask)[im] != 0;
                            });
  }
  const auto kept = [&](std::int64_t off) {
    return keep.empty() || keep[static_cast<std::size_t>(off)] != 0;
  };

  Tensor<T> y(x.shape());
  if (mask == nullptr && inner == 1) {
    // contiguous rows (attention scores)
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* xr = x.data() + o * n;
      T* yr = y.data() + o * n;
      const T mx = *std::max_element(xr, xr + n);
      T sum = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        yr[k] = std::exp(xr[k] - mx);
        sum += yr[k];
      }
      const T inv = T{1} / sum;
      for (std::int64_t k = 0; k < n; ++k) yr[k] *= inv;
    }
    return y;
  }
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = masked_logit<T>();
      bool any = false;
      for (std::int64_t k = 0; k < n; ++k) {
        const std::int64_t off = base + k * inner;
        if (!kept(off)) continue;
        any = true;
        mx = std::max(mx, x[off]);
      }
      if (!any) throw ParameterError("softmax: fully masked slice");
      T sum = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const std::int64_t off = base + k * inner;
        const T e = kept(off) ? std::exp(x[off] - mx) : T{0};
        y[off] = e;
        sum += e;
      }
      for (std::int64_t k = 0; k < n; ++k) y[base + k * inner] /= sum;
    }
  }
  return y;
}

/// Gradient of softmax given its output y. Masked entries have y = 0 and
/// therefore receive zero gradient.
template <class T>
Tensor<T> softmax_vjp(const Tensor<T>& y, const Tensor<T>& gy, int axis) {
  const auto [outer, n, inner] = detail::split_axis(y.shape(), axis);
  Tensor<T> gx(y.shape());
  if (inner == 1) {
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* yr = y.data() + o * n;
      const T* gr = gy.data() + o * n;
      T* xr = gx.data() + o * n;
      T dot = 0;
      for (std::int64_t k = 0; k < n; ++k) dot += yr[k] * gr[k];
      for (std::int64_t k = 0; k < n; ++k) xr[k] = yr[k] * (gr[k] - dot);
    }
    return gx;
  }
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T dot = 0;
      for (std::int64_t k = 0; k < n; ++k) dot += y[base + k * inner] * gy[base + k * inner];
      for (std::int64_t k = 0; k < n; ++k) {
        const std::int64_t off = base + k * inner;
        gx[off] = y[off] * (gy[off] - dot);
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Convolutions on [b, c, h, w]
// ---------------------------------------------------------------------------

template <class T>
struct ConvGrads {
  Tensor<T> x, weight, bias;
};

/// Per-pixel channel map: y[b,o,p] = Σ_c weight[o,c]·x[b,c,p] + bias[o].
template <class T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 4 || weight.rank() != 2 || weight.extent(1) != x.extent(1) ||
      bias.numel() != weight.extent(0)) {
    throw DimensionError("conv1x1: channel mismatch between input " + x.shape().str() +
                         " and weight " + weight.shape().str());
  }
  const std::int64_t b = x.extent(0), ci = x.extent(1), co = weight.extent(0);
  const std::int64_t hw = x.extent(2) * x.extent(3);
  Tensor<T> y({b, co, x.extent(2), x.extent(3)});
  for (std::int64_t n = 0; n < b; ++n) {
    // Plain loops: channel sums run in ascending order, so results are
    // reproducible against a scalar reference.
    T* yn = y.data() + n * co * hw;
    const T* xn = x.data() + n * ci * hw;
    for (std::int64_t o = 0; o < co; ++o) {
      T* yo = yn + o * hw;
      for (std::int64_t c = 0; c < ci; ++c) {
        const T wv = weight[o * ci + c];
        const T* xc = xn + c * hw;
        for (std::int64_t p = 0; p < hw; ++p) yo[p] += wv * xc[p];
      }
      for (std::int64_t p = 0; p < hw; ++p) yo[p] += bias[o];
    }
  }
  return y;
}

template <class T>
ConvGrads<T> conv1x1_vjp(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy) {
  const std::int64_t b = x.extent(0), ci = x.extent(1), co = weight.extent(0);
  const std::int64_t hw = x.extent(2) * x.extent(3);
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({co})};
  for (std::int64_t n = 0; n < b; ++n) {
    const T* gn = gy.data() + n * co * hw;
    detail::gemm<T>(true, false, ci, hw, co, weight.data(), gn, g.x.data() + n * ci * hw, false);
    detail::gemm<T>(false, true, co, ci, hw, gn, x.data() + n * ci * hw, g.weight.data(), true);
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t p = 0; p < hw; ++p) g.bias[o] += gn[o * hw + p];
  }
  return g;
}

namespace detail {

inline std::int64_t conv_out_extent(std::int64_t in, int stride) { return (in + 2 - 3) / stride + 1; }

/// cols[(c*9 + ky*3 + kx), oy*wo + ox] = x[c, oy*s + ky - 1, ox*s + kx - 1] (zero padded).
template <class T>
void im2col3x3(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, int stride, T* cols) {
  const std::int64_t ho = conv_out_extent(h, stride), wo = conv_out_extent(w, stride);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + ((ch * 9) + ky * 3 + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - 1;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = x + (ch * h + iy) * w;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + kx - 1;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <class T>
void col2im3x3(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w, int stride, T* x) {
  const std::int64_t ho = conv_out_extent(h, stride), wo = conv_out_extent(w, stride);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((ch * 9) + ky * 3 + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (ch * h + iy) * w;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 convolution, zero padding 1, stride 1 or 2. weight is [co, ci, 3, 3].
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                  int stride = 1) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.extent(1) != x.extent(1) ||
      weight.extent(2) != 3 || weight.extent(3) != 3 || bias.numel() != weight.extent(0)) {
    throw DimensionError("conv3x3: input " + x.shape().str() + " does not match weight " +
                         weight.shape().str());
  }
  if (stride != 1 && stride != 2) throw ParameterError("conv3x3: stride must be 1 or 2");
  const std::int64_t b = x.extent(0), ci = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::int64_t co = weight.extent(0);
  const std::int64_t ho = detail::conv_out_extent(h, stride), wo = detail::conv_out_extent(w, stride);
  Tensor<T> y({b, co, ho, wo});
  std::vector<T> cols(static_cast<std::size_t>(ci * 9 * ho * wo));
  for (std::int64_t n = 0; n < b; ++n) {
    detail::im2col3x3(x.data() + n * ci * h * w, ci, h, w, stride, cols.data());
    T* yn = y.data() + n * co * ho * wo;
    detail::gemm<T>(false, false, co, ho * wo, ci * 9, weight.data(), cols.data(), yn, false);
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t p = 0; p < ho * wo; ++p) yn[o * ho * wo + p] += bias[o];
  }
  return y;
}

template <class T>
ConvGrads<T> conv3x3_vjp(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy,
                         int stride = 1) {
  const std::int64_t b = x.extent(0), ci = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::int64_t co = weight.extent(0);
  const std::int64_t ho = gy.extent(2), wo = gy.extent(3);
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({co})};
  std::vector<T> cols(static_cast<std::size_t>(ci * 9 * ho * wo));
  for (std::int64_t n = 0; n < b; ++n) {
    const T* gn = gy.data() + n * co * ho * wo;
    detail::im2col3x3(x.data() + n * ci * h * w, ci, h, w, stride, cols.data());
    detail::gemm<T>(false, true, co, ci * 9, ho * wo, gn, cols.data(), g.weight.data(), true);
    detail::gemm<T>(true, false, ci * 9, ho * wo, co, weight.data(), gn, cols.data(), false);
    detail::col2im3x3(cols.data(), ci, h, w, stride, g.x.data() + n * ci * h * w);
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t p = 0; p < ho * wo; ++p) g.bias[o] += gn[o * ho * wo + p];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise suite
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    Tensor<T> y = a;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += b[i];
    return y;
  }
  Tensor<T> y(detail::broadcast_shape(a.shape(), b.shape()));
  detail::broadcast_visit(a.shape(), b.shape(), y.shape(),
                          [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                            y[o] = a[ia] + b[ib];
                          });
  return y;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> add_vjp(const Shape& a, const Shape& b, const Tensor<T>& gy) {
  return {detail::reduce_to(gy, a), detail::reduce_to(gy, b)};
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y(detail::broadcast_shape(a.shape(), b.shape()));
  detail::broadcast_visit(a.shape(), b.shape(), y.shape(),
                          [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                            y[o] = a[ia] * b[ib];
                          });
  return y;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> mul_vjp(const Tensor<T>& a, const Tensor<T>& b,
                                        const Tensor<T>& gy) {
  Tensor<T> ga(gy.shape()), gb(gy.shape());
  detail::broadcast_visit(a.shape(), b.shape(), gy.shape(),
                          [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                            ga[o] = gy[o] * b[ib];
                            gb[o] = gy[o] * a[ia];
                          });
  return {detail::reduce_to(ga, a.shape()), detail::reduce_to(gb, b.shape())};
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  Tensor<T> y = x;
  for (auto& v : y.values()) v *= s;
  return y;
}

template <class T>
T sigmoid(T v) {
  return T{1} / (T{1} + std::exp(-v));
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <class T>
Tensor<T> silu_vjp(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T s = sigmoid(x[i]);
    gx[i] = gy[i] * (s * (T{1} + x[i] * (T{1} - s)));
  }
  return gx;
}

/// In-place accumulate: acc += g (same shape).
template <class T>
void accumulate(Tensor<T>& acc, const Tensor<T>& g) {
  require_same_shape(acc.shape(), g.shape(), "accumulate");
  T* a = acc.data();
  const T* b = g.data();
  for (std::int64_t i = 0; i < acc.numel(); ++i) a[i] += b[i];
}

// ---------------------------------------------------------------------------
// layer_norm (no affine)
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, int axis) {
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(inner)), var(static_cast<std::size_t>(inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* xo = x.data() + o * n * inner;
    T* yo = y.data() + o * n * inner;
    std::fill(mean.begin(), mean.end(), T{0});
    std::fill(var.begin(), var.end(), T{0});
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) mean[static_cast<std::size_t>(i)] += xo[k * inner + i];
    for (auto& m : mean) m /= static_cast<T>(n);
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) {
        const T d = xo[k * inner + i] - mean[static_cast<std::size_t>(i)];
        var[static_cast<std::size_t>(i)] += d * d;
      }
    for (auto& v : var) v = T{1} / std::sqrt(v / static_cast<T>(n) + static_cast<T>(kLayerNormEps));
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i)
        yo[k * inner + i] =
            (xo[k * inner + i] - mean[static_cast<std::size_t>(i)]) * var[static_cast<std::size_t>(i)];
  }
  return y;
}

template <class T>
Tensor<T> layer_norm_vjp(const Tensor<T>& x, const Tensor<T>& gy, int axis) {
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  const Tensor<T> y = layer_norm(x, axis);
  Tensor<T> gx(x.shape());
  std::vector<T> inv(static_cast<std::size_t>(inner)), mg(static_cast<std::size_t>(inner)),
      mgy(static_cast<std::size_t>(inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    const std::int64_t base = o * n * inner;
    std::fill(inv.begin(), inv.end(), T{0});
    std::fill(mg.begin(), mg.end(), T{0});
    std::fill(mgy.begin(), mgy.end(), T{0});
    std::vector<T> mean(static_cast<std::size_t>(inner), T{0});
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) mean[static_cast<std::size_t>(i)] += x[base + k * inner + i];
    for (auto& m : mean) m /= static_cast<T>(n);
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) {
        const T d = x[base + k * inner + i] - mean[static_cast<std::size_t>(i)];
        inv[static_cast<std::size_t>(i)] += d * d;
      }
    for (auto& v : inv) v = T{1} / std::sqrt(v / static_cast<T>(n) + static_cast<T>(kLayerNormEps));
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t off = base + k * inner + i;
        mg[static_cast<std::size_t>(i)] += gy[off];
        mgy[static_cast<std::size_t>(i)] += gy[off] * y[off];
      }
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t off = base + k * inner + i;
        const auto s = static_cast<std::size_t>(i);
        gx[off] = inv[s] * (gy[off] - mg[s] / static_cast<T>(n) - y[off] * mgy[s] / static_cast<T>(n));
      }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Resampling and channel plumbing on [b, c, h, w]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const std::int64_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Tensor<T> y({b, c, 2 * h, 2 * w});
  for (std::int64_t p = 0; p < b * c; ++p)
    for (std::int64_t i = 0; i < 2 * h; ++i)
      for (std::int64_t j = 0; j < 2 * w; ++j)
        y[(p * 2 * h + i) * 2 * w + j] = x[(p * h + i / 2) * w + j / 2];
  return y;
}

template <class T>
Tensor<T> upsample_nearest2x_vjp(const Tensor<T>& gy) {
  const std::int64_t b = gy.extent(0), c = gy.extent(1), h = gy.extent(2) / 2, w = gy.extent(3) / 2;
  Tensor<T> gx({b, c, h, w});
  for (std::int64_t p = 0; p < b * c; ++p)
    for (std::int64_t i = 0; i < 2 * h; ++i)
      for (std::int64_t j = 0; j < 2 * w; ++j)
        gx[(p * h + i / 2) * w + j / 2] += gy[(p * 2 * h + i) * 2 * w + j];
  return gx;
}

/// Concatenates two [b, c_i, h, w] maps along channels.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.extent(0) != b.extent(0) || a.extent(2) != b.extent(2) || a.extent(3) != b.extent(3)) {
    throw DimensionError("concat_channels: " + a.shape().str() + " vs " + b.shape().str());
  }
  const std::int64_t n = a.extent(0), ca = a.extent(1), cb = b.extent(1);
  const std::int64_t hw = a.extent(2) * a.extent(3);
  Tensor<T> y({n, ca + cb, a.extent(2), a.extent(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw, y.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw, y.data() + i * (ca + cb) * hw + ca * hw);
  }
  return y;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_vjp(const Tensor<T>& gy, std::int64_t ca) {
  const std::int64_t n = gy.extent(0), c = gy.extent(1), cb = c - ca;
  const std::int64_t hw = gy.extent(2) * gy.extent(3);
  Tensor<T> ga({n, ca, gy.extent(2), gy.extent(3)}), gb({n, cb, gy.extent(2), gy.extent(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(gy.data() + i * c * hw, ca * hw, ga.data() + i * ca * hw);
    std::copy_n(gy.data() + i * c * hw + ca * hw, cb * hw, gb.data() + i * cb * hw);
  }
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
T sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.values()) s += v;
  return s;
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  T s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Mean squared error and its gradient with respect to `pred`.
template <class T>
T mse(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "mse");
  T s = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const T d = pred[i] - target[i];
    s += d * d;
  }
  return s / static_cast<T>(pred.numel());
}

template <class T>
Tensor<T> mse_vjp(const Tensor<T>& pred, const Tensor<T>& target, T gy = T{1}) {
  Tensor<T> g(pred.shape());
  const T k = T{2} * gy / static_cast<T>(pred.numel());
  for (std::int64_t i = 0; i < pred.numel(); ++i) g[i] = k * (pred[i] - target[i]);
  return g;
}

}  // namespace roictrl
