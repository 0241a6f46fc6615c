#pragma once

// Training loop: fixed-seed data stream, per-sample gradients summed in
// sample order, Adam update.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "roictrl/blend.hpp"
#include "roictrl/checkpoint.hpp"
#include "roictrl/diffusion.hpp"
#include "roictrl/model.hpp"
#include "roictrl/optim.hpp"
#include "roictrl/parallel.hpp"
#include "roictrl/scene.hpp"

namespace roictrl {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  ModelConfig model;
  AdamOptions adam;
  double alpha = kDefaultRegWeight;  ///< weight of the blend regulariser
  int steps = 5000;
  int batch = 2;
  std::uint64_t seed = 0;
  int min_instances = 0, max_instances = 6;
};

struct StepLog {
  int step = 0;
  double loss = 0, l_ldm = 0, l_reg = 0, grad_norm = 0;
};

/// Identity of one training sample: which scene, which timestep.
struct SampleId {
  std::uint64_t scene_seed = 0;
  int t = 0;
};

inline SampleId training_sample(std::uint64_t seed, int step, int k, int timesteps) {
  const std::uint64_t s = mix_seed(mix_seed(seed) ^ (static_cast<std::uint64_t>(step) << 8) ^ static_cast<std::uint64_t>(k));
  Rng rng = make_rng(s, 0x7157);
  return {s, std::uniform_int_distribution<int>(0, timesteps - 1)(rng)};
}

template <class T>
class Trainer {
 public:
  explicit Trainer(const TrainOptions& o)
      : opts_(o),
        model_(o.model, o.seed),
        adam_(o.adam),
        sched_(o.model.schedule()) {
    if (o.batch < 1 || o.steps < 0) throw ParameterError("train: batch must be >= 1 and steps >= 0");
    if (o.alpha < 0) throw ParameterError("train: alpha must be >= 0");
    data_.height = data_.width = o.model.image_size;
    data_.min_instances = o.min_instances;
    data_.max_instances = o.max_instances;
  }

  const ToyModel<T>& model() const { return model_; }
  ToyModel<T>& model() { return model_; }
  const NoiseSchedule& schedule() const { return sched_; }
  int steps_done() const { return step_; }

  ToyScene scene_for(const SampleId& id) const { return synth_scene(id.scene_seed, data_); }

  Tensor<T> noise_for(const SampleId& id) const {
    Rng rng = make_rng(id.scene_seed, 0xE95);
    return normal<T>({1, 3, data_.height, data_.width}, rng);
  }

  /// Loss terms of the current model on a sample, without updating.
  LossTerms<T> evaluate(const SampleId& id) const {
    return ldm_loss(model_, scene_for(id), id.t, noise_for(id), sched_, static_cast<T>(opts_.alpha));
  }

  /// One optimizer step. Throws TrainingError on a non-finite loss; `dump`
  /// receives a description of the offending batch first.
  StepLog step(const std::function<void(const std::string&)>& dump = {}) {
    const int b = opts_.batch;
    std::vector<SampleId> ids;
    for (int k = 0; k < b; ++k) ids.push_back(training_sample(opts_.seed, step_, k, opts_.model.timesteps));
    std::vector<ModelWeights<T>> grads(static_cast<std::size_t>(b));
    std::vector<LossTerms<T>> terms(static_cast<std::size_t>(b));
    const T scale = T{1} / static_cast<T>(b);
    parallel_for(b, [&](std::int64_t k) {
      const auto& id = ids[static_cast<std::size_t>(k)];
      auto& g = grads[static_cast<std::size_t>(k)];
      g = model_.zero_grads();
      terms[static_cast<std::size_t>(k)] =
          ldm_loss(model_, scene_for(id), id.t, noise_for(id), sched_, static_cast<T>(opts_.alpha), &g, scale);
    });
    StepLog log;
    log.step = step_;
    for (const auto& t : terms) {
      log.l_ldm += double(t.l_ldm) / b;
      log.l_reg += double(t.l_reg) / b;
    }
    log.loss = log.l_ldm + opts_.alpha * log.l_reg;
    if (!std::isfinite(log.loss)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step_ << "\n";
      for (int k = 0; k < b; ++k) {
        const auto& id = ids[static_cast<std::size_t>(k)];
        os << "sample " << k << " scene_seed=" << id.scene_seed << " t=" << id.t
           << " l_ldm=" << terms[static_cast<std::size_t>(k)].l_ldm
           << " l_reg=" << terms[static_cast<std::size_t>(k)].l_reg;
        for (const auto& inst : scene_for(id).layout.instances) {
          os << " [" << inst.describe() << " " << inst.box.x1 << "," << inst.box.y1 << "," << inst.box.x2 << ","
             << inst.box.y2 << "]";
        }
        os << "\n";
      }
      if (dump) dump(os.str());
      throw TrainingError(os.str());
    }
    ModelWeights<T>& total = grads[0];
    for (int k = 1; k < b; ++k) {
      std::vector<Tensor<T>*> dst;
      total.visit("", [&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
      std::size_t i = 0;
      grads[static_cast<std::size_t>(k)].visit("", [&](const std::string&, Tensor<T>& t) { accumulate(*dst[i++], t); });
    }
    log.grad_norm = adam_.step(model_.weights, total);
    ++step_;
    return log;
  }

 private:
  TrainOptions opts_;
  ToyModel<T> model_;
  Adam adam_;
  NoiseSchedule sched_;
  LayoutOptions data_;
  int step_ = 0;
};

inline void write_metrics_header(std::ostream& os) { os << "step,loss,l_ldm,l_reg\n"; }

inline void write_metrics_row(std::ostream& os, const StepLog& s) {
  os << s.step << ',' << std::setprecision(9) << s.loss << ',' << s.l_ldm << ',' << s.l_reg << '\n';
}

/// Full run into `out_dir`: metrics.csv, checkpoint.bin, and
/// nonfinite_batch.txt if training diverges.
template <class T>
ToyModel<T> train_to_directory(const TrainOptions& o, const std::filesystem::path& out_dir,
                               const std::function<void(const StepLog&)>& progress = {}) {
  std::filesystem::create_directories(out_dir);
  Trainer<T> trainer(o);
  std::ofstream metrics(out_dir / "metrics.csv");
  if (!metrics) throw TrainingError("cannot write " + (out_dir / "metrics.csv").string());
  write_metrics_header(metrics);
  auto dump = [&](const std::string& text) { std::ofstream(out_dir / "nonfinite_batch.txt") << text; };
  for (int s = 0; s < o.steps; ++s) {
    const StepLog log = trainer.step(dump);
    write_metrics_row(metrics, log);
    if (progress) progress(log);
  }
  save_checkpoint((out_dir / "checkpoint.bin").string(), trainer.model());
  return trainer.model();
}

}  // namespace roictrl
