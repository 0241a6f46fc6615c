#pragma once

// Synthetic multi-instance scenes: colored squares, circles and triangles on
// a solid background, plus the closed caption vocabulary describing them.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "roictrl/random.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

inline constexpr int kNumColors = 8;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumBackgrounds = 2;

enum class ShapeKind : int { square = 0, circle = 1, triangle = 2 };

struct Rgb {
  double r, g, b;
};

/// Instance palette in [-1, 1].
inline constexpr std::array<Rgb, kNumColors> kPalette{{
    {1, 1, 1},     // white
    {1, -1, -1},   // red
    {-1, 1, -1},   // green
    {1, 1, -1},    // yellow
    {-1, -1, 1},   // blue
    {1, -1, 1},    // magenta
    {-1, 1, 1},    // cyan
    {1, 0, -1},    // orange
}};
inline constexpr std::array<std::string_view, kNumColors> kColorNames{
    "white", "red", "green", "yellow", "blue", "magenta", "cyan", "orange"};
inline constexpr std::array<std::string_view, kNumShapes> kShapeNames{"square", "circle", "triangle"};

inline constexpr std::array<Rgb, kNumBackgrounds> kBackgrounds{{{-1, -1, -1}, {0, 0, 0}}};
inline constexpr std::array<std::string_view, kNumBackgrounds> kBackgroundNames{"black", "gray"};

// Caption vocabulary: colors, shapes, background colors, the word
// "background".
inline constexpr int kColorToken0 = 0;
inline constexpr int kShapeToken0 = kColorToken0 + kNumColors;
inline constexpr int kBackgroundToken0 = kShapeToken0 + kNumShapes;
inline constexpr int kBackgroundWord = kBackgroundToken0 + kNumBackgrounds;
inline constexpr int kVocabSize = kBackgroundWord + 1;
inline constexpr int kCaptionLength = 2;

struct InstanceSpec {
  RoiBox box;
  int color = 0;
  ShapeKind shape = ShapeKind::square;

  std::array<int, kCaptionLength> caption() const {
    return {kColorToken0 + color, kShapeToken0 + static_cast<int>(shape)};
  }
  std::string describe() const {
    return std::string(kColorNames[static_cast<std::size_t>(color)]) + " " +
           std::string(kShapeNames[static_cast<std::size_t>(shape)]);
  }
};

struct LayoutSpec {
  std::int64_t height = 64, width = 64;
  int background = 0;
  std::vector<InstanceSpec> instances;  ///< drawn in order; later occludes earlier

  std::array<int, kCaptionLength> global_caption() const { return {kBackgroundToken0 + background, kBackgroundWord}; }
  RoiBoxBatch boxes() const {
    RoiBoxBatch b(1, static_cast<std::int64_t>(instances.size()));
    for (std::size_t i = 0; i < instances.size(); ++i) b.set(0, static_cast<std::int64_t>(i), instances[i].box);
    return b;
  }
};

/// A rendered scene. `visibility[i]` is the fraction of instance i's own
/// shape pixels left uncovered by later instances.
struct ToyScene {
  LayoutSpec layout;
  Tensor<double> image;  ///< [3, H, W] in [-1, 1]
  std::vector<double> visibility;

  template <class T>
  Tensor<T> image_as() const {
    return image.cast<T>().reshaped({1, 3, layout.height, layout.width});
  }
};

/// Whether pixel (y, x) of an h x w raster belongs to the shape drawn in `box`.
inline bool shape_covers(const InstanceSpec& inst, std::int64_t h, std::int64_t w, std::int64_t y, std::int64_t x) {
  const double x1 = inst.box.x1 * static_cast<double>(w), x2 = inst.box.x2 * static_cast<double>(w);
  const double y1 = inst.box.y1 * static_cast<double>(h), y2 = inst.box.y2 * static_cast<double>(h);
  const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
  if (!(x1 <= cx && cx < x2 && y1 <= cy && cy < y2)) return false;
  const double mx = (x1 + x2) / 2, my = (y1 + y2) / 2, hw = (x2 - x1) / 2, hh = (y2 - y1) / 2;
  switch (inst.shape) {
    case ShapeKind::square:
      return true;
    case ShapeKind::circle: {
      const double u = (cx - mx) / hw, v = (cy - my) / hh;
      return u * u + v * v <= 1.0;
    }
    case ShapeKind::triangle: {
      // apex at the top, base on the bottom edge; the half-width is taken
      // at the bottom edge of the pixel row so every row is non-empty
      const double row_bottom = std::min(static_cast<double>(y) + 1.0, y2);
      const double half = std::max(0.5, (row_bottom - y1) / (y2 - y1) * hw);
      return std::abs(cx - mx) <= half;
    }
  }
  return false;
}

/// Reference rasterizer.
inline ToyScene render_scene(const LayoutSpec& layout) {
  const std::int64_t h = layout.height, w = layout.width;
  ToyScene s{layout, Tensor<double>({3, h, w}), {}};
  const Rgb bg = kBackgrounds.at(static_cast<std::size_t>(layout.background));
  for (std::int64_t p = 0; p < h * w; ++p) {
    s.image[p] = bg.r;
    s.image[h * w + p] = bg.g;
    s.image[2 * h * w + p] = bg.b;
  }
  std::vector<int> owner(static_cast<std::size_t>(h * w), -1);
  std::vector<std::int64_t> drawn(layout.instances.size(), 0);
  for (std::size_t i = 0; i < layout.instances.size(); ++i) {
    const auto& inst = layout.instances[i];
    const Rgb c = kPalette.at(static_cast<std::size_t>(inst.color));
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        if (!shape_covers(inst, h, w, y, x)) continue;
        const std::int64_t p = y * w + x;
        s.image[p] = c.r;
        s.image[h * w + p] = c.g;
        s.image[2 * h * w + p] = c.b;
        owner[static_cast<std::size_t>(p)] = static_cast<int>(i);
        ++drawn[i];
      }
  }
  std::vector<std::int64_t> visible(layout.instances.size(), 0);
  for (int o : owner)
    if (o >= 0) ++visible[static_cast<std::size_t>(o)];
  for (std::size_t i = 0; i < drawn.size(); ++i)
    s.visibility.push_back(drawn[i] > 0 ? static_cast<double>(visible[i]) / static_cast<double>(drawn[i]) : 0.0);
  return s;
}

struct LayoutOptions {
  std::int64_t height = 64, width = 64;
  int min_instances = 0, max_instances = 6;
  std::int64_t min_side = 6, max_side = 28;  ///< in pixels, measured on the shorter image side
  bool allow_overlap = true;
  std::int64_t gap = 1;  ///< minimum pixel gap between boxes when overlap is disallowed
};

/// Random layout with pixel-aligned boxes.
inline LayoutSpec random_layout(Rng& rng, const LayoutOptions& o) {
  if (o.min_instances < 0 || o.max_instances < o.min_instances) throw ParameterError("layout: bad instance range");
  std::uniform_int_distribution<int> pick_n(o.min_instances, o.max_instances), pick_color(0, kNumColors - 1),
      pick_shape(0, kNumShapes - 1), pick_bg(0, kNumBackgrounds - 1);
  std::uniform_int_distribution<std::int64_t> pick_side(o.min_side, o.max_side);
  LayoutSpec spec;
  spec.height = o.height;
  spec.width = o.width;
  spec.background = pick_bg(rng);
  const int n = pick_n(rng);
  struct PixBox {
    std::int64_t x0, y0, x1, y1;
  };
  std::vector<PixBox> placed;
  const double sx = static_cast<double>(o.width) / static_cast<double>(std::min(o.height, o.width));
  const double sy = static_cast<double>(o.height) / static_cast<double>(std::min(o.height, o.width));
  for (int k = 0; k < n; ++k) {
    bool ok = false;
    PixBox pb{};
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      // shrink if the canvas is crowded
      const std::int64_t cap = std::max(o.min_side, o.max_side - attempt / 10);
      const std::int64_t bw = std::min<std::int64_t>(o.width, std::llround(static_cast<double>(std::min(pick_side(rng), cap)) * sx));
      const std::int64_t bh = std::min<std::int64_t>(o.height, std::llround(static_cast<double>(std::min(pick_side(rng), cap)) * sy));
      std::uniform_int_distribution<std::int64_t> px(0, o.width - bw), py(0, o.height - bh);
      pb = {px(rng), py(rng), 0, 0};
      pb.x1 = pb.x0 + bw;
      pb.y1 = pb.y0 + bh;
      ok = true;
      if (!o.allow_overlap) {
        for (const auto& q : placed) {
          if (pb.x0 < q.x1 + o.gap && q.x0 < pb.x1 + o.gap && pb.y0 < q.y1 + o.gap && q.y0 < pb.y1 + o.gap) {
            ok = false;
            break;
          }
        }
      }
    }
    if (!ok) break;
    placed.push_back(pb);
    InstanceSpec inst;
    inst.box = RoiBox::make(static_cast<double>(pb.x0) / static_cast<double>(o.width),
                            static_cast<double>(pb.y0) / static_cast<double>(o.height),
                            static_cast<double>(pb.x1) / static_cast<double>(o.width),
                            static_cast<double>(pb.y1) / static_cast<double>(o.height));
    inst.color = pick_color(rng);
    inst.shape = static_cast<ShapeKind>(pick_shape(rng));
    spec.instances.push_back(inst);
  }
  return spec;
}

inline ToyScene synth_scene(std::uint64_t seed, const LayoutOptions& o) {
  Rng rng = make_rng(seed, 0x5CE7E);
  return render_scene(random_layout(rng, o));
}

/// Binary PPM (P6) of a [3, H, W] image in [-1, 1].
template <class T>
void write_ppm(const std::string& path, const Tensor<T>& image) {
  const std::int64_t h = image.extent(-2), w = image.extent(-1);
  if (image.numel() != 3 * h * w) throw DimensionError("write_ppm: expected 3 channels, got " + image.shape().str());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  for (std::int64_t p = 0; p < h * w; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(image[c * h * w + p]), -1.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround((v + 1.0) * 127.5))));
    }
}

}  // namespace roictrl
