#pragma once

// Caption injection paths.
//
// Token matrices are row-major [tokens, width]. Feature maps are [1, c, h, w]
// for a single batch element; the model loops over the batch.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "roictrl/ops.hpp"
#include "roictrl/random.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

/// Caption tokens [L, d]. `instance` is empty for the global caption.
template <class T>
struct CaptionEmbedding {
  Tensor<T> tokens;
  std::optional<std::int64_t> instance;
};

// ---------------------------------------------------------------------------
// Layout helpers
// ---------------------------------------------------------------------------

/// [1, c, h, w] -> [h*w, c]
template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  const std::int64_t c = map.extent(1), hw = map.extent(2) * map.extent(3);
  return transpose_last2(map.reshaped({c, hw}));
}

/// [h*w, c] -> [1, c, h, w]
template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::int64_t h, std::int64_t w) {
  const std::int64_t c = tokens.extent(1);
  return transpose_last2(tokens).reshaped({1, c, h, w});
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention core
// ---------------------------------------------------------------------------

template <class T>
struct AttentionCache {
  Tensor<T> q, k, v, probs;
};

/// softmax(q kᵀ / sqrt(d)) v for q [nq, d], k [nk, d], v [nk, dv].
template <class T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         AttentionCache<T>* cache = nullptr) {
  if (q.extent(1) != k.extent(1) || k.extent(0) != v.extent(0)) {
    throw DimensionError("attention: q " + q.shape().str() + ", k " + k.shape().str() + ", v " +
                         v.shape().str());
  }
  const std::int64_t nq = q.extent(0), nk = k.extent(0), d = q.extent(1), dv = v.extent(1);
  Tensor<T> scores({nq, nk});
  detail::gemm<T>(false, true, nq, nk, d, q.data(), k.data(), scores.data(), false);
  const T s = T{1} / std::sqrt(static_cast<T>(d));
  for (auto& x : scores.values()) x *= s;
  Tensor<T> probs = softmax(scores, 1);
  Tensor<T> out({nq, dv});
  detail::gemm<T>(false, false, nq, dv, nk, probs.data(), v.data(), out.data(), false);
  if (cache != nullptr) *cache = {q, k, v, std::move(probs)};
  return out;
}

template <class T>
struct AttentionGrads {
  Tensor<T> q, k, v;
};

template <class T>
AttentionGrads<T> attention_core_vjp(const AttentionCache<T>& c, const Tensor<T>& gout) {
  const std::int64_t nq = c.q.extent(0), nk = c.k.extent(0), d = c.q.extent(1), dv = c.v.extent(1);
  Tensor<T> gp({nq, nk});
  detail::gemm<T>(false, true, nq, nk, dv, gout.data(), c.v.data(), gp.data(), false);
  Tensor<T> gs = softmax_vjp(c.probs, gp, 1);
  const T s = T{1} / std::sqrt(static_cast<T>(d));
  for (auto& x : gs.values()) x *= s;
  AttentionGrads<T> g{Tensor<T>(c.q.shape()), Tensor<T>(c.k.shape()), Tensor<T>(c.v.shape())};
  detail::gemm<T>(false, false, nq, d, nk, gs.data(), c.k.data(), g.q.data(), false);
  detail::gemm<T>(true, false, nk, d, nq, gs.data(), c.q.data(), g.k.data(), false);
  detail::gemm<T>(true, false, nk, dv, nq, c.probs.data(), gout.data(), g.v.data(), false);
  return g;
}

// ---------------------------------------------------------------------------
// Shared cross-attention (global and instance captions use one weight set)
// ---------------------------------------------------------------------------

template <class T>
struct CrossAttentionWeights {
  Tensor<T> wq, wk, wv, wo;  // [c,d] [dt,d] [dt,d] [d,c]

  static CrossAttentionWeights init(std::int64_t c, std::int64_t dt, std::int64_t d, Rng& rng) {
    return {normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({dt, d}, rng, 1.0 / std::sqrt(double(dt))),
            normal<T>({dt, d}, rng, 1.0 / std::sqrt(double(dt))),
            normal<T>({d, c}, rng, 1.0 / std::sqrt(double(d)))};
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "wq", wq);
    f(prefix + "wk", wk);
    f(prefix + "wv", wv);
    f(prefix + "wo", wo);
  }
};

template <class T>
struct CrossAttentionCache {
  Tensor<T> queries, caption, attended;
  AttentionCache<T> core;
};

/// Single-head cross-attention of query tokens [n, c] over caption tokens.
template <class T>
Tensor<T> cross_attention(const Tensor<T>& queries, const CaptionEmbedding<T>& caption,
                          const CrossAttentionWeights<T>& w,
                          CrossAttentionCache<T>* cache = nullptr) {
  if (queries.rank() != 2 || queries.extent(1) != w.wq.extent(0)) {
    throw DimensionError("cross_attention: query width " + queries.shape().str() +
                         " does not match projection " + w.wq.shape().str());
  }
  if (caption.tokens.rank() != 2 || caption.tokens.extent(1) != w.wk.extent(0)) {
    throw DimensionError("cross_attention: caption " + caption.tokens.shape().str() +
                         " does not match projection " + w.wk.shape().str());
  }
  AttentionCache<T> core;
  Tensor<T> attended = attention_core(linear(queries, w.wq), linear(caption.tokens, w.wk),
                                      linear(caption.tokens, w.wv), &core);
  Tensor<T> out = linear(attended, w.wo);
  if (cache != nullptr) *cache = {queries, caption.tokens, std::move(attended), std::move(core)};
  return out;
}

template <class T>
struct CrossAttentionInputGrads {
  Tensor<T> queries, caption;
};

/// Accumulates weight gradients into `gw`.
template <class T>
CrossAttentionInputGrads<T> cross_attention_vjp(const CrossAttentionCache<T>& c,
                                                const CrossAttentionWeights<T>& w,
                                                const Tensor<T>& gout,
                                                CrossAttentionWeights<T>& gw) {
  Tensor<T> gatt = linear_vjp(c.attended, w.wo, gout, gw.wo);
  auto g = attention_core_vjp(c.core, gatt);
  CrossAttentionInputGrads<T> res;
  res.queries = linear_vjp(c.queries, w.wq, g.q, gw.wq);
  res.caption = linear_vjp(c.caption, w.wk, g.k, gw.wk);
  accumulate(res.caption, linear_vjp(c.caption, w.wv, g.v, gw.wv));
  return res;
}

// ---------------------------------------------------------------------------
// ROI self-attention: per-instance refinement over the r×r lattice tokens
// ---------------------------------------------------------------------------

template <class T>
struct RoiSelfAttentionWeights {
  Tensor<T> pos, wq, wk, wv, wo;  // pos [r*r, c]; wo starts at zero (identity)

  static RoiSelfAttentionWeights init(std::int64_t r, std::int64_t c, std::int64_t d, Rng& rng) {
    return {normal<T>({r * r, c}, rng, 0.5), normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))), Tensor<T>({d, c})};
  }
  std::int64_t side() const {
    return static_cast<std::int64_t>(std::lround(std::sqrt(double(pos.extent(0)))));
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "pos", pos);
    f(prefix + "wq", wq);
    f(prefix + "wk", wk);
    f(prefix + "wv", wv);
    f(prefix + "wo", wo);
  }
};

template <class T>
struct RoiSelfAttentionCache {
  Tensor<T> with_pos, normed, q, k, v, attended;
  AttentionCache<T> core;
};

/// tokens [r*r, c] -> tokens + Attn(LN(tokens + pos)) wo
template <class T>
Tensor<T> roi_self_attention_tokens(const Tensor<T>& tokens, const RoiSelfAttentionWeights<T>& w,
                                    RoiSelfAttentionCache<T>* cache = nullptr) {
  require_same_shape(tokens.shape(), w.pos.shape(), "roi_self_attention");
  RoiSelfAttentionCache<T> c;
  c.with_pos = add(tokens, w.pos);
  c.normed = layer_norm(c.with_pos, 1);
  c.q = linear(c.normed, w.wq);
  c.k = linear(c.normed, w.wk);
  c.v = linear(c.normed, w.wv);
  c.attended = attention_core(c.q, c.k, c.v, &c.core);
  Tensor<T> out = add(tokens, linear(c.attended, w.wo));
  if (cache != nullptr) *cache = std::move(c);
  return out;
}

template <class T>
Tensor<T> roi_self_attention_tokens_vjp(const RoiSelfAttentionCache<T>& c,
                                        const RoiSelfAttentionWeights<T>& w, const Tensor<T>& gout,
                                        RoiSelfAttentionWeights<T>& gw) {
  Tensor<T> gatt = linear_vjp(c.attended, w.wo, gout, gw.wo);
  auto g = attention_core_vjp(c.core, gatt);
  Tensor<T> gnorm = linear_vjp(c.normed, w.wq, g.q, gw.wq);
  accumulate(gnorm, linear_vjp(c.normed, w.wk, g.k, gw.wk));
  accumulate(gnorm, linear_vjp(c.normed, w.wv, g.v, gw.wv));
  Tensor<T> gpos = layer_norm_vjp(c.with_pos, gnorm, 1);
  accumulate(gw.pos, gpos);
  Tensor<T> gin = gout;
  accumulate(gin, gpos);
  return gin;
}

/// Stack-level form on [b, n, c, r, r]; instances never mix and invalid
/// slots stay zero.
template <class T>
Tensor<T> roi_self_attention(const Tensor<T>& stack, const RoiBoxBatch& boxes,
                             const RoiSelfAttentionWeights<T>& w) {
  const std::int64_t nb = stack.extent(0), n = stack.extent(1), c = stack.extent(2),
                     r = stack.extent(3);
  Tensor<T> out(stack.shape());
  for (std::int64_t b = 0; b < nb; ++b) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (!boxes.valid(b, i)) continue;
      const std::int64_t off = (b * n + i) * c * r * r;
      Tensor<T> slot({c, r * r}, std::span<const T>(stack.data() + off, c * r * r));
      Tensor<T> refined = transpose_last2(roi_self_attention_tokens(transpose_last2(slot), w));
      std::copy_n(refined.data(), c * r * r, out.data() + off);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masked-attention baseline
// ---------------------------------------------------------------------------

/// Runs the shared cross-attention with every pixel as a query once per
/// instance, then zeros everything outside the quantized box mask. Output is
/// [b, n, c, h, w].
template <class T>
Tensor<T> masked_instance_attention(const Tensor<T>& feature,
                                    const std::vector<std::vector<CaptionEmbedding<T>>>& captions,
                                    const RoiBoxBatch& boxes, const CrossAttentionWeights<T>& w) {
  const std::int64_t nb = feature.extent(0), c = feature.extent(1), h = feature.extent(2),
                     wd = feature.extent(3), n = boxes.capacity();
  const Mask mask = quantized_mask(boxes, h, wd);
  Tensor<T> out({nb, n, c, h, wd});
  for (std::int64_t b = 0; b < nb; ++b) {
    Tensor<T> map({1, c, h, wd}, std::span<const T>(feature.data() + b * c * h * wd, c * h * wd));
    const Tensor<T> tokens = map_to_tokens(map);
    parallel_for(n, [&](std::int64_t i) {
      if (!boxes.valid(b, i)) return;
      const Tensor<T> att =
          transpose_last2(cross_attention(tokens, captions[static_cast<std::size_t>(b)]
                                                          [static_cast<std::size_t>(i)], w));
      const std::uint8_t* m = mask.data() + (b * n + i) * h * wd;
      T* dst = out.data() + (b * n + i) * c * h * wd;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < h * wd; ++p) dst[ch * h * wd + p] = m[p] ? att[ch * h * wd + p] : T{0};
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fourier features
// ---------------------------------------------------------------------------

inline constexpr int kFourierFrequencies = 8;

/// [sin(2^k π x), cos(2^k π x)] for k < F, per coordinate.
template <class T>
void fourier_encode(std::span<const double> coords, T* out, int freqs = kFourierFrequencies) {
  std::size_t o = 0;
  for (double x : coords) {
    for (int k = 0; k < freqs; ++k) {
      const double a = std::ldexp(std::numbers::pi, k) * x;
      out[o++] = static_cast<T>(std::sin(a));
      out[o++] = static_cast<T>(std::cos(a));
    }
  }
}

inline constexpr std::int64_t kBoxFourierWidth = 4 * 2 * kFourierFrequencies;
inline constexpr std::int64_t kPixelFourierWidth = 2 * 2 * kFourierFrequencies;

/// [n_valid, 64] Fourier features of the valid boxes of batch element b.
template <class T>
Tensor<T> box_fourier(const RoiBoxBatch& boxes, std::int64_t b, std::vector<std::int64_t>* slots = nullptr) {
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < boxes.capacity(); ++i)
    if (boxes.valid(b, i)) idx.push_back(i);
  Tensor<T> f({std::max<std::int64_t>(1, static_cast<std::int64_t>(idx.size())), kBoxFourierWidth});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const RoiBox& bx = boxes.box(b, idx[k]);
    const double c[4] = {bx.x1, bx.y1, bx.x2, bx.y2};
    fourier_encode<T>(c, f.data() + static_cast<std::int64_t>(k) * kBoxFourierWidth);
  }
  if (slots != nullptr) *slots = idx;
  return f;
}

/// [h*w, 32] Fourier features of normalized pixel-center coordinates.
template <class T>
Tensor<T> pixel_fourier(std::int64_t h, std::int64_t w) {
  Tensor<T> f({h * w, kPixelFourierWidth});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double c[2] = {(double(x) + 0.5) / double(w), (double(y) + 0.5) / double(h)};
      fourier_encode<T>(c, f.data() + (y * w + x) * kPixelFourierWidth);
    }
  return f;
}

/// Box-local pixel coordinates (u, v, 1-u, 1-v) for every (pixel, valid box)
/// pair, Fourier encoded: [h*w, n_valid, 64].
template <class T>
Tensor<T> local_box_fourier(const RoiBoxBatch& boxes, std::int64_t b, std::int64_t h, std::int64_t w) {
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < boxes.capacity(); ++i)
    if (boxes.valid(b, i)) idx.push_back(i);
  const auto n = std::max<std::int64_t>(1, static_cast<std::int64_t>(idx.size()));
  Tensor<T> f({h * w, n, kBoxFourierWidth});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const RoiBox& bx = boxes.box(b, idx[k]);
        const double u = ((double(x) + 0.5) / double(w) - bx.x1) / bx.width();
        const double v = ((double(y) + 0.5) / double(h) - bx.y1) / bx.height();
        const double c[4] = {u, v, 1.0 - u, 1.0 - v};
        fourier_encode<T>(c, f.data() + ((y * w + x) * n + static_cast<std::int64_t>(k)) * kBoxFourierWidth);
      }
  return f;
}

// ---------------------------------------------------------------------------
// Box guidance: tanh-gated attention from spatial tokens to box tokens
// ---------------------------------------------------------------------------

enum class CoordinateFrame { global, local };

template <class T>
struct BoxGuidanceWeights {
  Tensor<T> box_proj, box_bias, pos_proj, wq, wk, wv, wo, gate;

  static BoxGuidanceWeights init(std::int64_t c, std::int64_t d, Rng& rng) {
    return {normal<T>({kBoxFourierWidth, c}, rng, 1.0 / std::sqrt(double(kBoxFourierWidth))),
            Tensor<T>({c}),
            normal<T>({kPixelFourierWidth, c}, rng, 1.0 / std::sqrt(double(kPixelFourierWidth))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({d, c}, rng, 1.0 / std::sqrt(double(d))),
            Tensor<T>({1})};
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "box_proj", box_proj);
    f(prefix + "box_bias", box_bias);
    f(prefix + "pos_proj", pos_proj);
    f(prefix + "wq", wq);
    f(prefix + "wk", wk);
    f(prefix + "wv", wv);
    f(prefix + "wo", wo);
    f(prefix + "gate", gate);
  }
};

template <class T>
struct BoxGuidanceCache {
  CoordinateFrame frame = CoordinateFrame::global;
  bool active = false;
  std::int64_t h = 0, w = 0, n = 0;
  Tensor<T> tokens, normed, pix_feat, query_in, box_feat, box_tokens, q, k, v, attended, projected;
  AttentionCache<T> core;  // global frame
};

/// Pairwise attention used by the local frame: every query has its own keys.
/// q [N, d], k [N, n, d], v [N, n, dv] -> [N, dv]; probs [N, n] returned.
template <class T>
Tensor<T> pairwise_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             Tensor<T>& probs) {
  const std::int64_t nq = q.extent(0), n = k.extent(1), d = q.extent(1), dv = v.extent(2);
  const T s = T{1} / std::sqrt(static_cast<T>(d));
  Tensor<T> scores({nq, n});
  for (std::int64_t p = 0; p < nq; ++p)
    for (std::int64_t i = 0; i < n; ++i) {
      T acc = 0;
      for (std::int64_t j = 0; j < d; ++j) acc += q[p * d + j] * k[(p * n + i) * d + j];
      scores[p * n + i] = acc * s;
    }
  probs = softmax(scores, 1);
  Tensor<T> out({nq, dv});
  for (std::int64_t p = 0; p < nq; ++p)
    for (std::int64_t i = 0; i < n; ++i) {
      const T a = probs[p * n + i];
      for (std::int64_t j = 0; j < dv; ++j) out[p * dv + j] += a * v[(p * n + i) * dv + j];
    }
  return out;
}

template <class T>
Tensor<T> box_guidance(const Tensor<T>& fused, const RoiBoxBatch& boxes, std::int64_t b,
                       const BoxGuidanceWeights<T>& w, CoordinateFrame frame = CoordinateFrame::global,
                       BoxGuidanceCache<T>* cache = nullptr) {
  const std::int64_t h = fused.extent(2), wd = fused.extent(3), c = fused.extent(1);
  const std::int64_t n = boxes.valid_count(b);
  BoxGuidanceCache<T> cc;
  cc.frame = frame;
  cc.h = h;
  cc.w = wd;
  cc.n = n;
  if (n == 0) {
    if (cache != nullptr) *cache = std::move(cc);
    return fused;
  }
  cc.active = true;
  cc.tokens = map_to_tokens(fused);
  cc.normed = layer_norm(cc.tokens, 1);
  const std::int64_t d = w.wq.extent(1);
  if (frame == CoordinateFrame::global) {
    cc.pix_feat = pixel_fourier<T>(h, wd);
    cc.query_in = add(cc.normed, linear(cc.pix_feat, w.pos_proj));
    cc.box_feat = box_fourier<T>(boxes, b);
    cc.box_tokens = linear(cc.box_feat, w.box_proj, &w.box_bias);
    cc.q = linear(cc.query_in, w.wq);
    cc.k = linear(cc.box_tokens, w.wk);
    cc.v = linear(cc.box_tokens, w.wv);
    cc.attended = attention_core(cc.q, cc.k, cc.v, &cc.core);
  } else {
    cc.query_in = cc.normed;
    cc.box_feat = local_box_fourier<T>(boxes, b, h, wd).reshaped({h * wd * n, kBoxFourierWidth});
    cc.box_tokens = linear(cc.box_feat, w.box_proj, &w.box_bias);
    cc.q = linear(cc.query_in, w.wq);
    cc.k = linear(cc.box_tokens, w.wk).reshaped({h * wd, n, d});
    cc.v = linear(cc.box_tokens, w.wv).reshaped({h * wd, n, d});
    cc.attended = pairwise_attention(cc.q, cc.k, cc.v, cc.core.probs);
  }
  cc.projected = linear(cc.attended, w.wo);
  const T g = std::tanh(w.gate[0]);
  Tensor<T> out_tokens = cc.tokens;
  for (std::int64_t i = 0; i < out_tokens.numel(); ++i) out_tokens[i] += g * cc.projected[i];
  (void)c;
  if (cache != nullptr) *cache = std::move(cc);
  return tokens_to_map(out_tokens, h, wd);
}

template <class T>
Tensor<T> box_guidance_vjp(const BoxGuidanceCache<T>& cc, const BoxGuidanceWeights<T>& w,
                           const Tensor<T>& gmap, BoxGuidanceWeights<T>& gw) {
  if (!cc.active) return gmap;
  const Tensor<T> gtok = map_to_tokens(gmap);
  const T g = std::tanh(w.gate[0]);
  gw.gate[0] += (T{1} - g * g) * dot(gtok, cc.projected);
  Tensor<T> gproj = scale(gtok, g);
  Tensor<T> gatt = linear_vjp(cc.attended, w.wo, gproj, gw.wo);
  Tensor<T> gq, gbox;
  const std::int64_t d = w.wq.extent(1);
  if (cc.frame == CoordinateFrame::global) {
    auto ga = attention_core_vjp(cc.core, gatt);
    gq = ga.q;
    gbox = linear_vjp(cc.box_tokens, w.wk, ga.k, gw.wk);
    accumulate(gbox, linear_vjp(cc.box_tokens, w.wv, ga.v, gw.wv));
  } else {
    const std::int64_t nq = cc.q.extent(0), n = cc.n;
    const T s = T{1} / std::sqrt(static_cast<T>(d));
    Tensor<T> gk({nq, n, d}), gv({nq, n, d});
    gq = Tensor<T>({nq, d});
    for (std::int64_t p = 0; p < nq; ++p) {
      std::vector<T> gp(static_cast<std::size_t>(n));
      T dotp = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        T acc = 0;
        for (std::int64_t j = 0; j < d; ++j) acc += gatt[p * d + j] * cc.v[(p * n + i) * d + j];
        gp[static_cast<std::size_t>(i)] = acc;
        dotp += acc * cc.core.probs[p * n + i];
      }
      for (std::int64_t i = 0; i < n; ++i) {
        const T a = cc.core.probs[p * n + i];
        const T gs = a * (gp[static_cast<std::size_t>(i)] - dotp) * s;
        for (std::int64_t j = 0; j < d; ++j) {
          gv[(p * n + i) * d + j] = a * gatt[p * d + j];
          gq[p * d + j] += gs * cc.k[(p * n + i) * d + j];
          gk[(p * n + i) * d + j] = gs * cc.q[p * d + j];
        }
      }
    }
    gbox = linear_vjp(cc.box_tokens, w.wk, gk.reshaped({nq * n, d}), gw.wk);
    accumulate(gbox, linear_vjp(cc.box_tokens, w.wv, gv.reshaped({nq * n, d}), gw.wv));
  }
  // Box features are constants; only the projection receives gradient.
  linear_vjp(cc.box_feat, w.box_proj, gbox, gw.box_proj, &gw.box_bias);
  Tensor<T> gquery_in = linear_vjp(cc.query_in, w.wq, gq, gw.wq);
  if (cc.frame == CoordinateFrame::global) {
    linear_vjp(cc.pix_feat, w.pos_proj, gquery_in, gw.pos_proj);
  }
  Tensor<T> gtokens = gtok;
  accumulate(gtokens, layer_norm_vjp(cc.tokens, gquery_in, 1));
  return tokens_to_map(gtokens, cc.h, cc.w);
}

// ---------------------------------------------------------------------------
// Embedding-injection baseline (grounding tokens + gated self-attention)
// ---------------------------------------------------------------------------

template <class T>
struct EmbeddingInjectionWeights {
  Tensor<T> mlp1, b1, mlp2, b2, wq, wk, wv, wo, gate;

  static EmbeddingInjectionWeights init(std::int64_t c, std::int64_t dt, std::int64_t d, Rng& rng) {
    const std::int64_t in = dt + kBoxFourierWidth;
    return {normal<T>({in, c}, rng, 1.0 / std::sqrt(double(in))), Tensor<T>({c}),
            normal<T>({c, c}, rng, 1.0 / std::sqrt(double(c))), Tensor<T>({c}),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({c, d}, rng, 1.0 / std::sqrt(double(c))),
            normal<T>({d, c}, rng, 1.0 / std::sqrt(double(d))), Tensor<T>({1})};
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "mlp1", mlp1);
    f(prefix + "b1", b1);
    f(prefix + "mlp2", mlp2);
    f(prefix + "b2", b2);
    f(prefix + "wq", wq);
    f(prefix + "wk", wk);
    f(prefix + "wv", wv);
    f(prefix + "wo", wo);
    f(prefix + "gate", gate);
  }
};

template <class T>
struct EmbeddingInjectionCache {
  std::int64_t h = 0, w = 0, hw = 0, n = 0;
  Tensor<T> grounding_in, hidden, grounding, sequence, normed, q, k, v, attended, projected;
  AttentionCache<T> core;
};

/// captions: one CaptionEmbedding per valid box of batch element b, in slot order.
template <class T>
Tensor<T> embedding_injection_baseline(const Tensor<T>& feature,
                                       const std::vector<CaptionEmbedding<T>>& captions,
                                       const RoiBoxBatch& boxes, std::int64_t b,
                                       const EmbeddingInjectionWeights<T>& w,
                                       EmbeddingInjectionCache<T>* cache = nullptr) {
  const std::int64_t h = feature.extent(2), wd = feature.extent(3), c = feature.extent(1);
  const std::int64_t n = boxes.valid_count(b);
  if (static_cast<std::int64_t>(captions.size()) != n) {
    throw DimensionError("embedding_injection_baseline: " + std::to_string(captions.size()) +
                         " captions for " + std::to_string(n) + " boxes");
  }
  EmbeddingInjectionCache<T> cc;
  cc.h = h;
  cc.w = wd;
  cc.hw = h * wd;
  cc.n = n;
  const Tensor<T> tokens = map_to_tokens(feature);
  if (n > 0) {
    const std::int64_t dt = captions.front().tokens.extent(1);
    const Tensor<T> fourier = box_fourier<T>(boxes, b);
    cc.grounding_in = Tensor<T>({n, dt + kBoxFourierWidth});
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& cap = captions[static_cast<std::size_t>(i)].tokens;
      const std::int64_t len = cap.extent(0);
      for (std::int64_t j = 0; j < dt; ++j) {
        T acc = 0;
        for (std::int64_t l = 0; l < len; ++l) acc += cap[l * dt + j];
        cc.grounding_in[i * (dt + kBoxFourierWidth) + j] = acc / static_cast<T>(len);
      }
      for (std::int64_t j = 0; j < kBoxFourierWidth; ++j)
        cc.grounding_in[i * (dt + kBoxFourierWidth) + dt + j] = fourier[i * kBoxFourierWidth + j];
    }
    cc.hidden = linear(cc.grounding_in, w.mlp1, &w.b1);
    cc.grounding = linear(silu(cc.hidden), w.mlp2, &w.b2);
  }
  cc.sequence = Tensor<T>({cc.hw + n, c});
  std::copy_n(tokens.data(), cc.hw * c, cc.sequence.data());
  if (n > 0) std::copy_n(cc.grounding.data(), n * c, cc.sequence.data() + cc.hw * c);
  cc.normed = layer_norm(cc.sequence, 1);
  cc.q = linear(cc.normed, w.wq);
  cc.k = linear(cc.normed, w.wk);
  cc.v = linear(cc.normed, w.wv);
  cc.attended = attention_core(cc.q, cc.k, cc.v, &cc.core);
  cc.projected = linear(cc.attended, w.wo);
  const T g = std::tanh(w.gate[0]);
  Tensor<T> out = tokens;
  for (std::int64_t i = 0; i < cc.hw * c; ++i) out[i] += g * cc.projected[i];
  if (cache != nullptr) *cache = std::move(cc);
  return tokens_to_map(out, h, wd);
}

/// Returns the feature gradient; weight gradients accumulate into gw.
template <class T>
Tensor<T> embedding_injection_baseline_vjp(const EmbeddingInjectionCache<T>& cc,
                                           const EmbeddingInjectionWeights<T>& w,
                                           const Tensor<T>& gmap, EmbeddingInjectionWeights<T>& gw) {
  const Tensor<T> gtok = map_to_tokens(gmap);
  const std::int64_t c = gtok.extent(1);
  const T g = std::tanh(w.gate[0]);
  Tensor<T> gproj(cc.projected.shape());
  T gate_acc = 0;
  for (std::int64_t i = 0; i < cc.hw * c; ++i) {
    gproj[i] = g * gtok[i];
    gate_acc += gtok[i] * cc.projected[i];
  }
  gw.gate[0] += (T{1} - g * g) * gate_acc;
  Tensor<T> gatt = linear_vjp(cc.attended, w.wo, gproj, gw.wo);
  auto ga = attention_core_vjp(cc.core, gatt);
  Tensor<T> gnorm = linear_vjp(cc.normed, w.wq, ga.q, gw.wq);
  accumulate(gnorm, linear_vjp(cc.normed, w.wk, ga.k, gw.wk));
  accumulate(gnorm, linear_vjp(cc.normed, w.wv, ga.v, gw.wv));
  Tensor<T> gseq = layer_norm_vjp(cc.sequence, gnorm, 1);
  Tensor<T> gin = gtok;
  for (std::int64_t i = 0; i < cc.hw * c; ++i) gin[i] += gseq[i];
  if (cc.n > 0) {
    Tensor<T> ggr({cc.n, c}, std::span<const T>(gseq.data() + cc.hw * c, cc.n * c));
    Tensor<T> gact = linear_vjp(silu(cc.hidden), w.mlp2, ggr, gw.mlp2, &gw.b2);
    linear_vjp(cc.grounding_in, w.mlp1, silu_vjp(cc.hidden, gact), gw.mlp1, &gw.b1);
  }
  return tokens_to_map(gin, cc.h, cc.w);
}

}  // namespace roictrl
