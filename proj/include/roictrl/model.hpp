#pragma once

// Two-scale toy denoiser with an instance adapter at each scale.
//
// Layout (64x64 input): conv_in → res(hi) → adapter(hi, r=25) → stride-2 conv
// → res(lo) → adapter(lo, r=19) → res(lo) → upsample + conv → skip add →
// res(hi) → out conv. Everything runs per sample on [1, c, h, w]; the
// training loop sums per-sample gradients in a fixed order.
//
// The network output f is turned into the noise estimate as
// ε̂ = sqrt(1 − ᾱ_t)·z + sqrt(ᾱ_t)·f (f regresses the velocity), so at large
// t the prediction does not hinge on reproducing z through the network.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "roictrl/attention.hpp"
#include "roictrl/blend.hpp"
#include "roictrl/diffusion.hpp"
#include "roictrl/ops.hpp"
#include "roictrl/random.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/scene.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

struct ModelConfig {
  std::int64_t image_size = 64;  ///< training resolution; fixes the ROI sides
  std::int64_t c_hi = 16, c_lo = 32;
  std::int64_t text_dim = 32, temb_dim = 64;
  bool self_attention = true;
  bool single_scale = false;
  CoordinateFrame frame = CoordinateFrame::global;
  bool velocity_output = true;  ///< false: the network output is ε̂ itself
  int timesteps = 1000;
  double beta_start = 1e-4, beta_end = 0.02;

  NoiseSchedule schedule() const { return NoiseSchedule::linear(timesteps, beta_start, beta_end); }

  std::int64_t r_hi() const { return roi_size(image_size, single_scale); }
  std::int64_t r_lo() const { return roi_size(image_size / 2, single_scale); }
};

/// Scene conditioning: boxes plus caption token ids.
struct Conditions {
  RoiBoxBatch boxes;  ///< batch 1, capacity max(1, n)
  std::array<int, kCaptionLength> global{};
  std::vector<std::array<int, kCaptionLength>> instances;

  static Conditions from(const LayoutSpec& layout) {
    Conditions c;
    c.boxes = layout.boxes();
    c.global = layout.global_caption();
    for (const auto& inst : layout.instances) c.instances.push_back(inst.caption());
    return c;
  }
};

// ---------------------------------------------------------------------------
// Residual block: x + conv(silu(LN(conv(silu(LN(x))) + temb))))
// ---------------------------------------------------------------------------

template <class T>
struct ResBlockWeights {
  Tensor<T> w1, b1, wt, bt, w2, b2;

  static ResBlockWeights init(std::int64_t c, std::int64_t temb, Rng& rng) {
    const double he = std::sqrt(2.0 / double(9 * c));
    return {normal<T>({c, c, 3, 3}, rng, he), Tensor<T>({c}),
            normal<T>({temb, c}, rng, 1.0 / std::sqrt(double(temb))), Tensor<T>({c}),
            normal<T>({c, c, 3, 3}, rng, 0.1 * he), Tensor<T>({c})};
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "conv1.weight", w1);
    f(prefix + "conv1.bias", b1);
    f(prefix + "temb.weight", wt);
    f(prefix + "temb.bias", bt);
    f(prefix + "conv2.weight", w2);
    f(prefix + "conv2.bias", b2);
  }
};

template <class T>
struct ResBlockCache {
  Tensor<T> x, a, b, c1, d, e;
};

namespace detail {

/// Adds per-channel offsets [c] to a [1, c, h, w] map.
template <class T>
void add_channel_bias(Tensor<T>& map, const Tensor<T>& v) {
  const std::int64_t c = map.extent(1), hw = map.extent(2) * map.extent(3);
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < hw; ++p) map[ch * hw + p] += v[ch];
}

template <class T>
Tensor<T> channel_sums(const Tensor<T>& map) {
  const std::int64_t c = map.extent(1), hw = map.extent(2) * map.extent(3);
  Tensor<T> s({1, c});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < hw; ++p) s[ch] += map[ch * hw + p];
  return s;
}

template <class T>
void accumulate_conv(const ConvGrads<T>& g, Tensor<T>& gw, Tensor<T>& gb) {
  accumulate(gw, g.weight);
  accumulate(gb, g.bias);
}

}  // namespace detail

/// temb_act: silu of the shared timestep embedding, [1, temb].
template <class T>
Tensor<T> res_block(const Tensor<T>& x, const Tensor<T>& temb_act, const ResBlockWeights<T>& w,
                    ResBlockCache<T>* cache) {
  ResBlockCache<T> c;
  c.a = layer_norm(x, 1);
  c.b = silu(c.a);
  c.c1 = conv3x3(c.b, w.w1, w.b1);
  detail::add_channel_bias(c.c1, linear(temb_act, w.wt, &w.bt));
  c.d = layer_norm(c.c1, 1);
  c.e = silu(c.d);
  Tensor<T> out = add(x, conv3x3(c.e, w.w2, w.b2));
  if (cache != nullptr) {
    c.x = x;
    *cache = std::move(c);
  }
  return out;
}

/// Returns the input gradient; accumulates into gw and gtemb_act.
template <class T>
Tensor<T> res_block_vjp(const ResBlockCache<T>& c, const ResBlockWeights<T>& w, const Tensor<T>& gout,
                        ResBlockWeights<T>& gw, const Tensor<T>& temb_act, Tensor<T>& gtemb_act) {
  auto g2 = conv3x3_vjp(c.e, w.w2, gout);
  detail::accumulate_conv(g2, gw.w2, gw.b2);
  const Tensor<T> gc1 = layer_norm_vjp(c.c1, silu_vjp(c.d, g2.x), 1);
  accumulate(gtemb_act, linear_vjp(temb_act, w.wt, detail::channel_sums(gc1), gw.wt, &gw.bt));
  auto g1 = conv3x3_vjp(c.b, w.w1, gc1);
  detail::accumulate_conv(g1, gw.w1, gw.b1);
  Tensor<T> gx = layer_norm_vjp(c.x, silu_vjp(c.a, g1.x), 1);
  accumulate(gx, gout);
  return gx;
}

// ---------------------------------------------------------------------------
// Instance adapter
// ---------------------------------------------------------------------------

template <class T>
struct AdapterWeights {
  CrossAttentionWeights<T> cross;  ///< shared by the global and instance captions
  std::optional<RoiSelfAttentionWeights<T>> self_attn;
  BlendParams<T> blend;
  BoxGuidanceWeights<T> guide;

  static AdapterWeights init(std::int64_t c, std::int64_t dt, std::int64_t r, bool self, Rng& rng) {
    AdapterWeights w{CrossAttentionWeights<T>::init(c, dt, c, rng), std::nullopt,
                     BlendParams<T>::init(c, rng), BoxGuidanceWeights<T>::init(c, c, rng)};
    if (self) w.self_attn = RoiSelfAttentionWeights<T>::init(r, c, c, rng);
    return w;
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    cross.visit(prefix + "cross.", f);
    if (self_attn) self_attn->visit(prefix + "self_attn.", f);
    blend.visit(prefix + "blend.", f);
    guide.visit(prefix + "guide.", f);
  }
};

template <class T>
struct AdapterCache {
  std::int64_t h = 0, w = 0, r = 0;
  Tensor<T> tokens, fg, weights;
  CrossAttentionCache<T> global;
  std::vector<CrossAttentionCache<T>> inst;
  std::vector<RoiSelfAttentionCache<T>> self;
  BlendCache<T> blend;
  BoxGuidanceCache<T> guide;
};

/// Gathers caption token rows from the embedding table.
template <class T>
CaptionEmbedding<T> caption_tokens(const Tensor<T>& table, const std::array<int, kCaptionLength>& ids,
                                   std::optional<std::int64_t> instance = std::nullopt) {
  const std::int64_t dt = table.extent(1);
  CaptionEmbedding<T> e{Tensor<T>({kCaptionLength, dt}), instance};
  for (int k = 0; k < kCaptionLength; ++k)
    std::copy_n(table.data() + ids[static_cast<std::size_t>(k)] * dt, dt, e.tokens.data() + k * dt);
  return e;
}

template <class T>
void scatter_caption_grad(Tensor<T>& gtable, const std::array<int, kCaptionLength>& ids, const Tensor<T>& g) {
  const std::int64_t dt = gtable.extent(1);
  for (int k = 0; k < kCaptionLength; ++k)
    for (std::int64_t j = 0; j < dt; ++j) gtable[ids[static_cast<std::size_t>(k)] * dt + j] += g[k * dt + j];
}

template <class T>
struct AdapterOutput {
  Tensor<T> map;
  T l_reg = 0;
};

template <class T>
AdapterOutput<T> adapter_forward(const Tensor<T>& x, const Conditions& cond, const Tensor<T>& table,
                                 const AdapterWeights<T>& w, std::int64_t r, CoordinateFrame frame,
                                 AdapterCache<T>* cache, std::vector<std::string>* trace,
                                 const std::string& name) {
  auto mark = [&](const char* stage) {
    if (trace != nullptr) trace->push_back(name + "." + stage);
  };
  const std::int64_t c = x.extent(1), h = x.extent(2), wd = x.extent(3), n = cond.boxes.capacity();
  AdapterCache<T> cc;
  cc.h = h;
  cc.w = wd;
  cc.r = r;
  cc.tokens = map_to_tokens(x);
  const Tensor<T> normed = layer_norm(cc.tokens, 1);
  mark("global_cross_attention");
  const Tensor<T> global =
      tokens_to_map(cross_attention(normed, caption_tokens(table, cond.global), w.cross, &cc.global), h, wd);
  mark("roi_align");
  const Tensor<T> roi = roi_align(tokens_to_map(normed, h, wd), cond.boxes, r);
  Tensor<T> inst_out(roi.shape());
  cc.inst.resize(static_cast<std::size_t>(n));
  cc.self.resize(static_cast<std::size_t>(n));
  mark("instance_cross_attention");
  if (w.self_attn) mark("roi_self_attention");
  for (std::int64_t i = 0; i < n; ++i) {
    if (!cond.boxes.valid(0, i)) continue;
    const std::int64_t off = i * c * r * r;
    const Tensor<T> slot({c, r * r}, std::span<const T>(roi.data() + off, c * r * r));
    Tensor<T> a = cross_attention(transpose_last2(slot),
                                  caption_tokens(table, cond.instances[static_cast<std::size_t>(i)], i),
                                  w.cross, &cc.inst[static_cast<std::size_t>(i)]);
    if (w.self_attn) a = roi_self_attention_tokens(a, *w.self_attn, &cc.self[static_cast<std::size_t>(i)]);
    const Tensor<T> back = transpose_last2(a);
    std::copy_n(back.data(), c * r * r, inst_out.data() + off);
  }
  mark("roi_unpool");
  const auto unpooled = roi_unpool(inst_out, cond.boxes, h, wd);
  mark("learnable_blend");
  auto blended = learnable_blend(global, unpooled.features, unpooled.occupancy, w.blend, &cc.blend);
  cc.fg = foreground_mask(unpooled.occupancy);
  AdapterOutput<T> out;
  out.l_reg = reg_loss(blended.weights, cc.fg);
  mark(frame == CoordinateFrame::global ? "box_guidance.global" : "box_guidance.local");
  out.map = add(x, box_guidance(blended.fused, cond.boxes, 0, w.guide, frame, &cc.guide));
  cc.weights = std::move(blended.weights);
  if (cache != nullptr) *cache = std::move(cc);
  return out;
}

template <class T>
Tensor<T> adapter_vjp(const AdapterCache<T>& cc, const Conditions& cond, const AdapterWeights<T>& w,
                      const Tensor<T>& gout, T g_reg, AdapterWeights<T>& gw, Tensor<T>& gtable) {
  const std::int64_t n = cond.boxes.capacity(), r = cc.r, c = gout.extent(1);
  const Tensor<T> gfused = box_guidance_vjp(cc.guide, w.guide, gout, gw.guide);
  const Tensor<T> gweights = reg_loss_vjp(cc.weights, cc.fg, g_reg);
  const auto gb = learnable_blend_vjp(cc.blend, w.blend, gfused, &gweights, gw.blend);
  const Tensor<T> ginst = roi_unpool_vjp(gb.instances, cond.boxes, r);
  Tensor<T> groi(ginst.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    if (!cond.boxes.valid(0, i)) continue;
    const std::int64_t off = i * c * r * r;
    const Tensor<T> slot({c, r * r}, std::span<const T>(ginst.data() + off, c * r * r));
    Tensor<T> ga = transpose_last2(slot);
    if (w.self_attn) {
      ga = roi_self_attention_tokens_vjp(cc.self[static_cast<std::size_t>(i)], *w.self_attn, ga, *gw.self_attn);
    }
    const auto gi = cross_attention_vjp(cc.inst[static_cast<std::size_t>(i)], w.cross, ga, gw.cross);
    scatter_caption_grad(gtable, cond.instances[static_cast<std::size_t>(i)], gi.caption);
    const Tensor<T> back = transpose_last2(gi.queries);
    std::copy_n(back.data(), c * r * r, groi.data() + off);
  }
  Tensor<T> gnormed = map_to_tokens(roi_align_vjp(groi, cond.boxes, cc.h, cc.w));
  const auto gg = cross_attention_vjp(cc.global, w.cross, map_to_tokens(gb.global), gw.cross);
  scatter_caption_grad(gtable, cond.global, gg.caption);
  accumulate(gnormed, gg.queries);
  Tensor<T> gx = tokens_to_map(layer_norm_vjp(cc.tokens, gnormed, 1), cc.h, cc.w);
  accumulate(gx, gout);
  return gx;
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kTimeFeatures = 32;

/// Sinusoidal timestep features, [1, kTimeFeatures].
template <class T>
Tensor<T> timestep_features(int t) {
  Tensor<T> f({1, kTimeFeatures});
  const std::int64_t half = kTimeFeatures / 2;
  for (std::int64_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
    f[k] = static_cast<T>(std::sin(double(t) * freq));
    f[half + k] = static_cast<T>(std::cos(double(t) * freq));
  }
  return f;
}

template <class T>
struct ModelWeights {
  Tensor<T> embed;                // caption vocabulary, [kVocabSize, text_dim]
  Tensor<T> t1, tb1, t2, tb2;     // timestep MLP
  Tensor<T> in_w, in_b;           // 3 → c_hi
  ResBlockWeights<T> res_hi_in;
  AdapterWeights<T> adapter_hi;
  Tensor<T> down_w, down_b;       // c_hi → c_lo, stride 2
  ResBlockWeights<T> res_lo_in;
  AdapterWeights<T> adapter_lo;
  ResBlockWeights<T> res_lo_mid;
  Tensor<T> up_w, up_b;           // c_lo → c_hi after nearest upsampling
  ResBlockWeights<T> res_hi_out;
  Tensor<T> out_w, out_b;         // c_hi → 3

  static ModelWeights init(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng = make_rng(seed, 0x1417);
    const std::int64_t ch = cfg.c_hi, cl = cfg.c_lo, dt = cfg.text_dim, te = cfg.temb_dim;
    auto he = [](std::int64_t fan_in) { return std::sqrt(2.0 / double(fan_in)); };
    ModelWeights w;
    w.embed = normal<T>({kVocabSize, dt}, rng, 1.0);
    w.t1 = normal<T>({kTimeFeatures, te}, rng, 1.0 / std::sqrt(double(kTimeFeatures)));
    w.tb1 = Tensor<T>({te});
    w.t2 = normal<T>({te, te}, rng, 1.0 / std::sqrt(double(te)));
    w.tb2 = Tensor<T>({te});
    w.in_w = normal<T>({ch, 3, 3, 3}, rng, he(27));
    w.in_b = Tensor<T>({ch});
    w.res_hi_in = ResBlockWeights<T>::init(ch, te, rng);
    w.adapter_hi = AdapterWeights<T>::init(ch, dt, cfg.r_hi(), cfg.self_attention, rng);
    w.down_w = normal<T>({cl, ch, 3, 3}, rng, he(9 * ch));
    w.down_b = Tensor<T>({cl});
    w.res_lo_in = ResBlockWeights<T>::init(cl, te, rng);
    w.adapter_lo = AdapterWeights<T>::init(cl, dt, cfg.r_lo(), cfg.self_attention, rng);
    w.res_lo_mid = ResBlockWeights<T>::init(cl, te, rng);
    w.up_w = normal<T>({ch, cl, 3, 3}, rng, he(9 * cl));
    w.up_b = Tensor<T>({ch});
    w.res_hi_out = ResBlockWeights<T>::init(ch, te, rng);
    w.out_w = normal<T>({3, ch, 3, 3}, rng, 0.1 * he(9 * ch));
    w.out_b = Tensor<T>({3});
    return w;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "caption_embedding", embed);
    f(prefix + "time.fc1.weight", t1);
    f(prefix + "time.fc1.bias", tb1);
    f(prefix + "time.fc2.weight", t2);
    f(prefix + "time.fc2.bias", tb2);
    f(prefix + "conv_in.weight", in_w);
    f(prefix + "conv_in.bias", in_b);
    res_hi_in.visit(prefix + "res_hi_in.", f);
    adapter_hi.visit(prefix + "adapter_hi.", f);
    f(prefix + "down.weight", down_w);
    f(prefix + "down.bias", down_b);
    res_lo_in.visit(prefix + "res_lo_in.", f);
    adapter_lo.visit(prefix + "adapter_lo.", f);
    res_lo_mid.visit(prefix + "res_lo_mid.", f);
    f(prefix + "up.weight", up_w);
    f(prefix + "up.bias", up_b);
    res_hi_out.visit(prefix + "res_hi_out.", f);
    f(prefix + "conv_out.weight", out_w);
    f(prefix + "conv_out.bias", out_b);
  }
};

/// Copies parameters between weight sets with identical layout, converting
/// the scalar type.
template <class Dst, class Src>
void copy_params(Dst& dst, Src src) {
  using SrcT = std::remove_cvref_t<decltype(src.embed)>;
  std::vector<const SrcT*> tensors;
  src.visit("", [&](const std::string&, auto& t) { tensors.push_back(&t); });
  std::size_t k = 0;
  dst.visit("", [&](const std::string& name, auto& t) {
    if (k >= tensors.size() || !(tensors[k]->shape() == t.shape())) {
      throw DimensionError("copy_params: layout mismatch at " + name);
    }
    using D = typename std::remove_cvref_t<decltype(t)>::value_type;
    t = tensors[k++]->template cast<D>();
  });
  if (k != tensors.size()) throw DimensionError("copy_params: parameter count mismatch");
}

template <class W>
std::int64_t parameter_count(W& w) {
  std::int64_t n = 0;
  w.visit("", [&](const std::string&, auto& t) { n += t.numel(); });
  return n;
}

template <class W>
std::vector<std::string> parameter_manifest(W& w) {
  std::vector<std::string> names;
  w.visit("", [&](const std::string& name, auto&) { names.push_back(name); });
  return names;
}

template <class T>
struct ModelCache {
  int t = 0;
  Tensor<T> z, tf, th, temb, temb_act;
  Tensor<T> h0, h1, h2, d0, d1, d2, d3, u_up, u0, u1, u2, o_a, o_b;
  ResBlockCache<T> r_hi_in, r_lo_in, r_lo_mid, r_hi_out;
  AdapterCache<T> a_hi, a_lo;
};

template <class T>
struct ForwardResult {
  Tensor<T> eps;  ///< predicted noise, [1, 3, H, W]
  T l_reg = 0;    ///< mean of the two adapter regularisers
};

template <class T>
class ToyModel {
 public:
  ModelConfig config;
  ModelWeights<T> weights;

  ToyModel() = default;
  ToyModel(ModelConfig cfg, std::uint64_t seed) : config(cfg), weights(ModelWeights<T>::init(cfg, seed)) {}

  /// z is [1, 3, H, W] with H and W even.
  ForwardResult<T> forward(const Tensor<T>& z, int t, const Conditions& cond, ModelCache<T>* cache = nullptr,
                           std::vector<std::string>* trace = nullptr) const {
    if (z.rank() != 4 || z.extent(0) != 1 || z.extent(1) != 3 || z.extent(2) % 2 || z.extent(3) % 2) {
      throw DimensionError("model input must be [1,3,H,W] with even H, W; got " + z.shape().str());
    }
    if (static_cast<std::int64_t>(cond.instances.size()) > cond.boxes.capacity()) {
      throw ParameterError("more instance captions than box slots");
    }
    auto mark = [&](const char* s) {
      if (trace != nullptr) trace->push_back(s);
    };
    const auto& w = weights;
    ModelCache<T> c;
    c.tf = timestep_features<T>(t);
    c.th = linear(c.tf, w.t1, &w.tb1);
    c.temb = linear(silu(c.th), w.t2, &w.tb2);
    c.temb_act = silu(c.temb);
    mark("conv_in");
    c.h0 = conv3x3(z, w.in_w, w.in_b);
    mark("res_hi_in");
    c.h1 = res_block(c.h0, c.temb_act, w.res_hi_in, &c.r_hi_in);
    auto ah = adapter_forward(c.h1, cond, w.embed, w.adapter_hi, config.r_hi(), config.frame, &c.a_hi, trace,
                              "adapter_hi");
    c.h2 = std::move(ah.map);
    mark("down");
    c.d0 = conv3x3(c.h2, w.down_w, w.down_b, 2);
    mark("res_lo_in");
    c.d1 = res_block(c.d0, c.temb_act, w.res_lo_in, &c.r_lo_in);
    auto al = adapter_forward(c.d1, cond, w.embed, w.adapter_lo, config.r_lo(), config.frame, &c.a_lo, trace,
                              "adapter_lo");
    c.d2 = std::move(al.map);
    mark("res_lo_mid");
    c.d3 = res_block(c.d2, c.temb_act, w.res_lo_mid, &c.r_lo_mid);
    mark("up");
    c.u_up = upsample_nearest2x(c.d3);
    c.u0 = conv3x3(c.u_up, w.up_w, w.up_b);
    c.u1 = add(c.u0, c.h2);
    mark("res_hi_out");
    c.u2 = res_block(c.u1, c.temb_act, w.res_hi_out, &c.r_hi_out);
    mark("conv_out");
    c.o_a = layer_norm(c.u2, 1);
    c.o_b = silu(c.o_a);
    ForwardResult<T> res{conv3x3(c.o_b, w.out_w, w.out_b), (ah.l_reg + al.l_reg) / T{2}};
    if (config.velocity_output) {
      const auto [sa, sb] = output_scales(t);
      for (std::int64_t i = 0; i < z.numel(); ++i) res.eps[i] = sb * z[i] + sa * res.eps[i];
    }
    if (cache != nullptr) {
      c.t = t;
      c.z = z;
      *cache = std::move(c);
    }
    return res;
  }

  /// Accumulates parameter gradients of <geps, eps> + g_reg · l_reg into `g`.
  void backward(const ModelCache<T>& c, const Conditions& cond, const Tensor<T>& geps, T g_reg,
                ModelWeights<T>& g) const {
    const auto& w = weights;
    Tensor<T> gtemb_act(c.temb_act.shape());
    Tensor<T> gf = geps;
    if (config.velocity_output) {
      const T sa = output_scales(c.t).first;
      for (auto& v : gf.values()) v *= sa;
    }
    auto go = conv3x3_vjp(c.o_b, w.out_w, gf);
    detail::accumulate_conv(go, g.out_w, g.out_b);
    Tensor<T> gu2 = layer_norm_vjp(c.u2, silu_vjp(c.o_a, go.x), 1);
    Tensor<T> gu1 = res_block_vjp(c.r_hi_out, w.res_hi_out, gu2, g.res_hi_out, c.temb_act, gtemb_act);
    auto gup = conv3x3_vjp(c.u_up, w.up_w, gu1);
    detail::accumulate_conv(gup, g.up_w, g.up_b);
    Tensor<T> gd3 = upsample_nearest2x_vjp(gup.x);
    Tensor<T> gd2 = res_block_vjp(c.r_lo_mid, w.res_lo_mid, gd3, g.res_lo_mid, c.temb_act, gtemb_act);
    Tensor<T> gd1 = adapter_vjp(c.a_lo, cond, w.adapter_lo, gd2, g_reg / T{2}, g.adapter_lo, g.embed);
    Tensor<T> gd0 = res_block_vjp(c.r_lo_in, w.res_lo_in, gd1, g.res_lo_in, c.temb_act, gtemb_act);
    auto gdown = conv3x3_vjp(c.h2, w.down_w, gd0, 2);
    detail::accumulate_conv(gdown, g.down_w, g.down_b);
    Tensor<T> gh2 = gdown.x;
    accumulate(gh2, gu1);  // skip connection
    Tensor<T> gh1 = adapter_vjp(c.a_hi, cond, w.adapter_hi, gh2, g_reg / T{2}, g.adapter_hi, g.embed);
    Tensor<T> gh0 = res_block_vjp(c.r_hi_in, w.res_hi_in, gh1, g.res_hi_in, c.temb_act, gtemb_act);
    auto gin = conv3x3_vjp(c.z, w.in_w, gh0);
    detail::accumulate_conv(gin, g.in_w, g.in_b);
    const Tensor<T> gtemb = silu_vjp(c.temb, gtemb_act);
    const Tensor<T> gth = linear_vjp(silu(c.th), w.t2, gtemb, g.t2, &g.tb2);
    linear_vjp(c.tf, w.t1, silu_vjp(c.th, gth), g.t1, &g.tb1);
  }

  /// (sqrt(ᾱ_t), sqrt(1 − ᾱ_t)) of the model's schedule.
  std::pair<T, T> output_scales(int t) const {
    const NoiseSchedule s = config.schedule();
    s.check(t);
    const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
    return {static_cast<T>(std::sqrt(ab)), static_cast<T>(std::sqrt(1.0 - ab))};
  }

  ModelWeights<T> zero_grads() const {
    ModelWeights<T> g = weights;
    g.visit("", [](const std::string&, Tensor<T>& t) { t.fill(T{0}); });
    return g;
  }

  /// Ordered stage names visited by forward for a scene with instances.
  std::vector<std::string> graph_fingerprint() const {
    LayoutSpec layout;
    layout.height = layout.width = config.image_size;
    layout.instances.push_back({RoiBox::make(0.25, 0.25, 0.75, 0.75), 1, ShapeKind::square});
    std::vector<std::string> trace;
    forward(Tensor<T>({1, 3, config.image_size, config.image_size}), 0, Conditions::from(layout), nullptr, &trace);
    return trace;
  }
};

// ---------------------------------------------------------------------------
// Denoising objective
// ---------------------------------------------------------------------------

template <class T>
struct LossTerms {
  T l_ldm = 0, l_reg = 0;
};

/// Noises the scene image at step t with eps and returns the ε-prediction
/// MSE and the regulariser. With `grads`, accumulates scale · ∇(l_ldm + α·l_reg).
template <class T>
LossTerms<T> ldm_loss(const ToyModel<T>& model, const ToyScene& scene, int t, const Tensor<T>& eps,
                      const NoiseSchedule& sched, T alpha = static_cast<T>(kDefaultRegWeight),
                      ModelWeights<T>* grads = nullptr, T scale = T{1}) {
  const Tensor<T> x0 = scene.image_as<T>();
  const Tensor<T> zt = q_sample(x0, t, eps, sched);
  const Conditions cond = Conditions::from(scene.layout);
  ModelCache<T> cache;
  const auto out = model.forward(zt, t, cond, grads != nullptr ? &cache : nullptr);
  LossTerms<T> res{mse(out.eps, eps), out.l_reg};
  if (grads != nullptr) model.backward(cache, cond, mse_vjp(out.eps, eps, scale), scale * alpha, *grads);
  return res;
}

/// ε-predictor closure for the DDIM sampler.
template <class T>
NoisePredictor<T> noise_predictor(const ToyModel<T>& model, const LayoutSpec& layout) {
  return [&model, cond = Conditions::from(layout)](const Tensor<T>& z, int t) { return model.forward(z, t, cond).eps; };
}

/// Generates an image for a layout: [3, H, W] in [-1, 1].
template <class T>
Tensor<double> generate(const ToyModel<T>& model, const LayoutSpec& layout, const NoiseSchedule& sched, int steps,
                        std::uint64_t seed) {
  const Tensor<T> img =
      ddim_sample<T>({1, 3, layout.height, layout.width}, noise_predictor(model, layout), sched, steps, seed);
  Tensor<double> out = img.template cast<double>().reshaped({3, layout.height, layout.width});
  for (auto& v : out.values()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

}  // namespace roictrl
