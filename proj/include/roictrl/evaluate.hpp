#pragma once

// Held-out benchmark: generate one image per layout and score it with the
// colour-segmentation detector.

#include <cstdint>
#include <vector>

#include "roictrl/diffusion.hpp"
#include "roictrl/eval.hpp"
#include "roictrl/model.hpp"
#include "roictrl/parallel.hpp"
#include "roictrl/scene.hpp"

namespace roictrl {

struct BenchmarkOptions {
  int scenes = 200;
  std::uint64_t seed = 1000003;  ///< layout and sampling seed; disjoint from training streams
  int min_instances = 1, max_instances = 6;
  int ddim_steps = 50;
};

/// Non-overlapping layouts so every instance is fully visible and the
/// detector's components map one-to-one onto boxes.
inline std::vector<ToyScene> benchmark_scenes(const BenchmarkOptions& o, std::int64_t height, std::int64_t width) {
  LayoutOptions lo;
  lo.height = height;
  lo.width = width;
  lo.min_instances = o.min_instances;
  lo.max_instances = o.max_instances;
  lo.allow_overlap = false;
  std::vector<ToyScene> out;
  for (int k = 0; k < o.scenes; ++k) {
    Rng rng = make_rng(o.seed + static_cast<std::uint64_t>(k), 0xBE7C);
    LayoutSpec spec = random_layout(rng, lo);
    // crowded canvases can fall short of the minimum; retry with new draws
    for (int retry = 1; static_cast<int>(spec.instances.size()) < o.min_instances && retry < 100; ++retry) {
      rng = make_rng(o.seed + static_cast<std::uint64_t>(k), 0xBE7C + static_cast<std::uint64_t>(retry));
      spec = random_layout(rng, lo);
    }
    out.push_back(render_scene(spec));
  }
  return out;
}

/// Generated images, one per scene, parallel over scenes (each scene has its
/// own sampling seed, so the result does not depend on the thread count).
template <class T>
std::vector<Tensor<double>> generate_benchmark(const ToyModel<T>& model, const std::vector<ToyScene>& scenes,
                                               const BenchmarkOptions& o, const NoiseSchedule& sched) {
  std::vector<Tensor<double>> images(scenes.size());
  parallel_for(static_cast<std::int64_t>(scenes.size()), [&](std::int64_t k) {
    images[static_cast<std::size_t>(k)] =
        generate(model, scenes[static_cast<std::size_t>(k)].layout, sched, o.ddim_steps,
                 mix_seed(o.seed ^ (0xD5ull << 40) ^ static_cast<std::uint64_t>(k)));
  });
  return images;
}

template <class T>
BenchMetrics evaluate_model(const ToyModel<T>& model, const BenchmarkOptions& o, const NoiseSchedule& sched,
                            std::vector<Tensor<double>>* images = nullptr) {
  const auto scenes = benchmark_scenes(o, model.config.image_size, model.config.image_size);
  auto generated = generate_benchmark(model, scenes, o, sched);
  auto m = bench_metrics(scenes, generated);
  if (images != nullptr) *images = std::move(generated);
  return m;
}

}  // namespace roictrl
