#pragma once

// Noise schedule, forward noising and the deterministic DDIM sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "roictrl/random.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

/// ROI side for a feature map of side R: round(6·log2 R − 11), or 7 for the
/// single-scale configuration.
inline std::int64_t roi_size(std::int64_t R, bool single_scale = false) {
  if (R < 4) throw ParameterError("roi_size: feature side must be >= 4, got " + std::to_string(R));
  if (single_scale) return 7;
  return std::max<std::int64_t>(1, std::llround(6.0 * std::log2(static_cast<double>(R)) - 11.0));
}

struct NoiseSchedule {
  std::vector<double> betas, alphas, alpha_bars;

  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw ParameterError("NoiseSchedule: step count must be >= 1");
    NoiseSchedule s;
    double ab = 1.0;
    for (int t = 0; t < steps; ++t) {
      const double beta =
          steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / static_cast<double>(steps - 1);
      ab *= 1.0 - beta;
      s.betas.push_back(beta);
      s.alphas.push_back(1.0 - beta);
      s.alpha_bars.push_back(ab);
    }
    return s;
  }

  int size() const { return static_cast<int>(betas.size()); }

  void check(int t) const {
    if (t < 0 || t >= size()) {
      throw ParameterError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(size()) + ")");
    }
  }
};

/// z_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  s.check(t);
  require_same_shape(x0.shape(), eps.shape(), "q_sample");
  const T a = static_cast<T>(std::sqrt(s.alpha_bars[static_cast<std::size_t>(t)]));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bars[static_cast<std::size_t>(t)]));
  Tensor<T> z(x0.shape());
  for (std::int64_t i = 0; i < z.numel(); ++i) z[i] = a * x0[i] + b * eps[i];
  return z;
}

/// Timesteps visited by a `steps`-step DDIM run, ascending:
/// t_i = (i + 1)·T / steps − 1, so the last one is always T − 1.
inline std::vector<int> ddim_timesteps(int steps, int T) {
  if (steps < 1 || steps > T) throw ParameterError("ddim: steps must be in [1, T]");
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i)
    ts.push_back(static_cast<int>((static_cast<std::int64_t>(i) + 1) * T / steps - 1));
  return ts;
}

/// ε-prediction callback: (z_t, t) → ε̂.
template <class T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>&, int)>;

/// Deterministic (η = 0) DDIM from a given starting noise z_T.
template <class T>
Tensor<T> ddim_sample_from(Tensor<T> z, const NoisePredictor<T>& predict, const NoiseSchedule& s,
                           int steps, bool clip_x0 = true) {
  const auto ts = ddim_timesteps(steps, s.size());
  for (int i = steps - 1; i >= 0; --i) {
    const int t = ts[static_cast<std::size_t>(i)];
    const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
    const double ab_prev = i > 0 ? s.alpha_bars[static_cast<std::size_t>(ts[static_cast<std::size_t>(i - 1)])] : 1.0;
    const Tensor<T> eps = predict(z, t);
    const T sa = static_cast<T>(std::sqrt(ab)), sb = static_cast<T>(std::sqrt(1.0 - ab));
    const T pa = static_cast<T>(std::sqrt(ab_prev)), pb = static_cast<T>(std::sqrt(1.0 - ab_prev));
    for (std::int64_t k = 0; k < z.numel(); ++k) {
      T x0 = (z[k] - sb * eps[k]) / sa;
      if (clip_x0) x0 = std::clamp(x0, T{-1}, T{1});
      z[k] = pa * x0 + pb * eps[k];
    }
  }
  return z;
}

/// DDIM from pure noise drawn from `seed`.
template <class T>
Tensor<T> ddim_sample(const Shape& shape, const NoisePredictor<T>& predict, const NoiseSchedule& s,
                      int steps, std::uint64_t seed, bool clip_x0 = true) {
  Rng rng = make_rng(seed, 0xD1);
  return ddim_sample_from(normal<T>(shape, rng), predict, s, steps, clip_x0);
}

}  // namespace roictrl
