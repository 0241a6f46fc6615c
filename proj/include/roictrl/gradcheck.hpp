#pragma once

// Central finite-difference gradient checks (64-bit).

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "roictrl/random.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl::gradcheck {

inline constexpr double kFdStep = 1e-6;
inline constexpr double kFdRtol = 1e-4;
inline constexpr double kFdAtol = 1e-8;

struct GradCheck {
  bool ok = true;
  double worst = 0.0;  // largest |a - n| / (rtol |n| + atol)
  std::string detail;
};

/// Central differences of a scalar function of x, compared entrywise with an
/// analytic gradient.
inline GradCheck check_gradient(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, const Tensor<double>& analytic,
                                const std::string& what = "") {
  GradCheck res;
  if (!(analytic.shape() == x.shape())) {
    res.ok = false;
    res.detail = what + ": gradient shape " + analytic.shape().str() + " != " + x.shape().str();
    return res;
  }
  Tensor<double> probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + kFdStep;
    const double fp = f(probe);
    probe[i] = orig - kFdStep;
    const double fm = f(probe);
    probe[i] = orig;
    const double num = (fp - fm) / (2 * kFdStep);
    const double err = std::abs(analytic[i] - num);
    const double ratio = err / (kFdRtol * std::abs(num) + kFdAtol);
    if (ratio > res.worst) res.worst = ratio;
    if (ratio > 1.0 && res.ok) {
      res.ok = false;
      std::ostringstream os;
      os << what << ": entry " << i << " analytic " << analytic[i] << " numeric " << num;
      res.detail = os.str();
    }
  }
  return res;
}

/// Random cotangent used to turn a tensor-valued op into a scalar probe.
inline Tensor<double> cotangent(const Shape& s, Rng& rng) { return normal<double>(s, rng); }

inline double probe(const Tensor<double>& y, const Tensor<double>& g) {
  double acc = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) acc += y[i] * g[i];
  return acc;
}

/// Copy of a weight set with every tensor zeroed (gradient accumulator).
template <class W>
W zeros_like_weights(W w) {
  w.visit("", [](const std::string&, auto& t) { t.fill(0); });
  return w;
}

template <class W>
Tensor<double>& nth_param(W& w, std::size_t idx) {
  Tensor<double>* out = nullptr;
  std::size_t k = 0;
  w.visit("", [&](const std::string&, Tensor<double>& t) {
    if (k++ == idx) out = &t;
  });
  return *out;
}

/// Finite-difference check of every tensor in a weight set. `loss(w)` must
/// return the scalar probe and `grads` hold the analytic gradients.
template <class W, class Loss>
GradCheck check_weight_gradients(const W& w, const W& grads, Loss&& loss) {
  std::vector<std::string> names;
  W copy = w;
  copy.visit("", [&](const std::string& n, Tensor<double>&) { names.push_back(n); });
  for (std::size_t i = 0; i < names.size(); ++i) {
    W g = grads;
    auto r = check_gradient(
        [&](const Tensor<double>& v) {
          W probe_w = w;
          nth_param(probe_w, i) = v;
          return loss(probe_w);
        },
        nth_param(copy, i), nth_param(g, i), names[i]);
    if (!r.ok) return r;
  }
  return {};
}

}  // namespace roictrl::gradcheck
