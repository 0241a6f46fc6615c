#pragma once

// Learnable blending of the global attention output with the unpooled
// instance outputs, and the foreground regulariser on the global slot.

#include <cstdint>
#include <string>

#include "roictrl/ops.hpp"
#include "roictrl/random.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

inline constexpr double kDefaultRegWeight = 0.01;

template <class T>
struct BlendParams {
  Tensor<T> weight, bias;  // shared 1x1 conv, [1, c] and [1]

  static BlendParams init(std::int64_t c, Rng& rng) {
    return {normal<T>({1, c}, rng, 0.1 / std::sqrt(double(c))), Tensor<T>({1})};
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
};

template <class T>
struct BlendCache {
  Tensor<T> global, instances, weights;
};

template <class T>
struct BlendResult {
  Tensor<T> fused;    ///< [b, c, h, w]
  Tensor<T> weights;  ///< [b, n+1, 1, h, w]; slot 0 is the global path
};

/// Slot validity for the (n+1)-way softmax: slot 0 everywhere, slot i where
/// instance i's occupancy is non-zero.
template <class T>
Mask blend_mask(const Tensor<T>& occupancy) {
  const std::int64_t nb = occupancy.extent(0), n = occupancy.extent(1);
  const std::int64_t hw = occupancy.extent(3) * occupancy.extent(4);
  Mask m({nb, n + 1, 1, occupancy.extent(3), occupancy.extent(4)});
  for (std::int64_t b = 0; b < nb; ++b) {
    std::fill_n(m.data() + b * (n + 1) * hw, hw, std::uint8_t{1});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < hw; ++p)
        m[(b * (n + 1) + i + 1) * hw + p] = occupancy[(b * n + i) * hw + p] != T{0};
  }
  return m;
}

/// global [b, c, h, w], instances [b, n, c, h, w], occupancy [b, n, 1, h, w].
template <class T>
BlendResult<T> learnable_blend(const Tensor<T>& global, const Tensor<T>& instances,
                               const Tensor<T>& occupancy, const BlendParams<T>& p,
                               BlendCache<T>* cache = nullptr) {
  if (global.rank() != 4 || instances.rank() != 5 || occupancy.rank() != 5 ||
      instances.extent(0) != global.extent(0) || instances.extent(2) != global.extent(1) ||
      instances.extent(3) != global.extent(2) || instances.extent(4) != global.extent(3) ||
      occupancy.extent(1) != instances.extent(1) || occupancy.extent(3) != global.extent(2) ||
      occupancy.extent(4) != global.extent(3)) {
    throw DimensionError("learnable_blend: global " + global.shape().str() + ", instances " +
                         instances.shape().str() + ", occupancy " + occupancy.shape().str());
  }
  const std::int64_t nb = global.extent(0), c = global.extent(1), h = global.extent(2),
                     w = global.extent(3), n = instances.extent(1), hw = h * w;
  const Tensor<T> lg = conv1x1(global, p.weight, p.bias);
  const Tensor<T> li = conv1x1(instances.reshaped({nb * n, c, h, w}), p.weight, p.bias);
  Tensor<T> logits({nb, n + 1, 1, h, w});
  for (std::int64_t b = 0; b < nb; ++b) {
    std::copy_n(lg.data() + b * hw, hw, logits.data() + b * (n + 1) * hw);
    std::copy_n(li.data() + b * n * hw, n * hw, logits.data() + (b * (n + 1) + 1) * hw);
  }
  const Mask mask = blend_mask(occupancy);
  BlendResult<T> res{Tensor<T>({nb, c, h, w}), softmax(logits, 1, &mask)};
  for (std::int64_t b = 0; b < nb; ++b) {
    for (std::int64_t k = 0; k <= n; ++k) {
      const T* wk = res.weights.data() + (b * (n + 1) + k) * hw;
      const T* ak = k == 0 ? global.data() + b * c * hw : instances.data() + ((b * n) + k - 1) * c * hw;
      const std::uint8_t* mk = mask.data() + (b * (n + 1) + k) * hw;
      T* out = res.fused.data() + b * c * hw;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t q = 0; q < hw; ++q)
          if (mk[q]) out[ch * hw + q] += wk[q] * ak[ch * hw + q];
    }
  }
  if (cache != nullptr) *cache = {global, instances, res.weights};
  return res;
}

template <class T>
struct BlendGrads {
  Tensor<T> global, instances;
};

/// gfused: gradient w.r.t. the fused map; gweights (optional): extra gradient
/// w.r.t. the blend weights (from the regulariser).
template <class T>
BlendGrads<T> learnable_blend_vjp(const BlendCache<T>& cc, const BlendParams<T>& p,
                                  const Tensor<T>& gfused, const Tensor<T>* gweights,
                                  BlendParams<T>& gp) {
  const std::int64_t nb = cc.global.extent(0), c = cc.global.extent(1), h = cc.global.extent(2),
                     w = cc.global.extent(3), n = cc.instances.extent(1), hw = h * w;
  BlendGrads<T> g{Tensor<T>(cc.global.shape()), Tensor<T>(cc.instances.shape())};
  Tensor<T> gw = gweights != nullptr ? *gweights : Tensor<T>(cc.weights.shape());
  for (std::int64_t b = 0; b < nb; ++b) {
    const T* gf = gfused.data() + b * c * hw;
    for (std::int64_t k = 0; k <= n; ++k) {
      const T* wk = cc.weights.data() + (b * (n + 1) + k) * hw;
      const T* ak = k == 0 ? cc.global.data() + b * c * hw : cc.instances.data() + (b * n + k - 1) * c * hw;
      T* gak = k == 0 ? g.global.data() + b * c * hw : g.instances.data() + (b * n + k - 1) * c * hw;
      T* gwk = gw.data() + (b * (n + 1) + k) * hw;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t q = 0; q < hw; ++q) {
          gak[ch * hw + q] = wk[q] * gf[ch * hw + q];
          gwk[q] += ak[ch * hw + q] * gf[ch * hw + q];
        }
    }
  }
  const Tensor<T> glogits = softmax_vjp(cc.weights, gw, 1);
  Tensor<T> glg({nb, 1, h, w}), gli({nb * n, 1, h, w});
  for (std::int64_t b = 0; b < nb; ++b) {
    std::copy_n(glogits.data() + b * (n + 1) * hw, hw, glg.data() + b * hw);
    std::copy_n(glogits.data() + (b * (n + 1) + 1) * hw, n * hw, gli.data() + b * n * hw);
  }
  auto cg = conv1x1_vjp(cc.global, p.weight, glg);
  auto ci = conv1x1_vjp(cc.instances.reshaped({nb * n, c, h, w}), p.weight, gli);
  accumulate(g.global, cg.x);
  accumulate(g.instances, ci.x.reshaped(cc.instances.shape()));
  accumulate(gp.weight, cg.weight);
  accumulate(gp.weight, ci.weight);
  accumulate(gp.bias, cg.bias);
  accumulate(gp.bias, ci.bias);
  return g;
}

/// Union of valid instance footprints, [b, 1, h, w].
template <class T>
Tensor<T> foreground_mask(const Tensor<T>& occupancy) {
  const std::int64_t nb = occupancy.extent(0), n = occupancy.extent(1);
  const std::int64_t h = occupancy.extent(3), w = occupancy.extent(4);
  Tensor<T> m({nb, 1, h, w});
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t q = 0; q < h * w; ++q)
        if (occupancy[(b * n + i) * h * w + q] != T{0}) m[b * h * w + q] = T{1};
  return m;
}

/// Mean global-slot weight over foreground pixels; 0 when there is no
/// foreground.
template <class T>
T reg_loss(const Tensor<T>& weights, const Tensor<T>& fg) {
  const std::int64_t nb = weights.extent(0), slots = weights.extent(1);
  const std::int64_t hw = weights.extent(3) * weights.extent(4);
  T num = 0, den = 0;
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t q = 0; q < hw; ++q) {
      const T m = fg[b * hw + q];
      num += m * weights[b * slots * hw + q];
      den += m;
    }
  return den > T{0} ? num / den : T{0};
}

template <class T>
Tensor<T> reg_loss_vjp(const Tensor<T>& weights, const Tensor<T>& fg, T g = T{1}) {
  const std::int64_t nb = weights.extent(0), slots = weights.extent(1);
  const std::int64_t hw = weights.extent(3) * weights.extent(4);
  Tensor<T> gw(weights.shape());
  const T den = sum(fg);
  if (!(den > T{0})) return gw;
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t q = 0; q < hw; ++q) gw[b * slots * hw + q] = g * fg[b * hw + q] / den;
  return gw;
}

template <class T>
T total_loss(T l_ldm, T l_reg, T alpha = static_cast<T>(kDefaultRegWeight)) {
  if (alpha < T{0}) throw ParameterError("total_loss: alpha must be >= 0");
  return l_ldm + alpha * l_reg;
}

}  // namespace roictrl
