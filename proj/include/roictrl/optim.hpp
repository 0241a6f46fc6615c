#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "roictrl/tensor.hpp"

namespace roictrl {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip = 1.0;  ///< global-norm clip; 0 disables
};

/// Adam with bias correction. Moments are kept in 64-bit regardless of the
/// parameter type.
class Adam {
 public:
  explicit Adam(AdamOptions o = {}) : opt_(o) {}

  /// Applies one update; returns the pre-clip gradient norm.
  template <class W>
  double step(W& params, W& grads) {
    double sq = 0;
    grads.visit("", [&](const std::string&, auto& g) {
      for (auto v : g.values()) sq += double(v) * double(v);
    });
    const double norm = std::sqrt(sq);
    const double clip = (opt_.grad_clip > 0 && norm > opt_.grad_clip) ? opt_.grad_clip / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    std::vector<const void*> gs;
    grads.visit("", [&](const std::string&, auto& g) { gs.push_back(&g); });
    std::size_t k = 0;
    params.visit("", [&](const std::string&, auto& p) {
      using Param = std::remove_cvref_t<decltype(p)>;
      const Param& g = *static_cast<const Param*>(gs[k]);
      if (m_.size() <= k) {
        m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      }
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double gi = double(g[i]) * clip;
        const auto s = static_cast<std::size_t>(i);
        m[s] = opt_.beta1 * m[s] + (1 - opt_.beta1) * gi;
        v[s] = opt_.beta2 * v[s] + (1 - opt_.beta2) * gi * gi;
        const double upd = opt_.lr * (m[s] / c1) / (std::sqrt(v[s] / c2) + opt_.eps);
        p[i] = static_cast<typename Param::value_type>(double(p[i]) - upd);
      }
      ++k;
    });
    return norm;
  }

  std::int64_t steps() const { return t_; }

 private:
  AdamOptions opt_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace roictrl
