#pragma once

// Subcommands of the roictrl binary. Each writes its artifacts plus the
// effective configuration (config.txt) into the output directory and
// returns a process exit code.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "roictrl/bench.hpp"
#include "roictrl/checkpoint.hpp"
#include "roictrl/config.hpp"
#include "roictrl/evaluate.hpp"
#include "roictrl/parallel.hpp"
#include "roictrl/scene.hpp"
#include "roictrl/train.hpp"
#include "roictrl/verify.hpp"

namespace roictrl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvariant = 1;
inline constexpr int kExitUsage = 2;

/// Creates `dir` and checks that a file can be written there.
inline void prepare_output_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto probe = dir / ".write_probe";
  {
    std::ofstream os(probe);
    if (!os) throw ConfigError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

inline void require_checkpoint(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("a checkpoint is required (--checkpoint or checkpoint = ...)");
  if (!std::filesystem::is_regular_file(c.checkpoint)) throw CheckpointError("checkpoint not found: " + c.checkpoint);
}

inline void echo_config(const RunConfig& c, const std::filesystem::path& dir) {
  std::ofstream(dir / "config.txt") << effective_config_text(c);
}

/// Copies the checkpoint's model settings into the config so the echo
/// describes the model that actually ran.
inline void adopt_checkpoint_model(RunConfig& c) {
  const auto info = inspect_checkpoint(c.checkpoint);
  c.train.model = info.config;
  c.ablations.clear();
  if (!info.config.self_attention) c.ablations.push_back("no-self-attn");
  if (info.config.frame == CoordinateFrame::local) c.ablations.push_back("local-coord");
  if (info.config.single_scale) c.ablations.push_back("single-scale");
}

class ThreadScope {
 public:
  explicit ThreadScope(int n) : saved_(num_threads()) { set_num_threads(n); }
  ~ThreadScope() { set_num_threads(saved_); }
  ThreadScope(const ThreadScope&) = delete;
  ThreadScope& operator=(const ThreadScope&) = delete;

 private:
  int saved_;
};

// --- verify ----------------------------------------------------------------

inline int cmd_verify(const std::string& filter, std::ostream& out) {
  out << std::left << std::setw(6) << "" << std::setw(15) << "module" << std::setw(32) << "property" << std::right
      << std::setw(10) << "time" << "\n";
  auto results = verify::run_verification(filter, [&](const verify::PropertyResult& r) {
    verify::print_result_row(out, r);
    out.flush();
  });
  std::vector<std::string> failed;
  for (const auto& r : results)
    if (!r.ok) failed.push_back(r.name);
  out << results.size() - failed.size() << "/" << results.size() << " properties passed\n";
  if (failed.empty()) return kExitOk;
  out << "failed:";
  for (const auto& f : failed) out << " " << f;
  out << "\n";
  return kExitInvariant;
}

// --- bench -----------------------------------------------------------------

struct BenchSummary {
  bool roi_flops_constant = true;
  bool ratio_strictly_decreasing = true;
  double rho = 0;  ///< Spearman(h·w, roi/mask time)
  std::vector<double> pixels, ratios;
};

/// Pairs each roi report with the mask report of the same config, in grid order.
inline BenchSummary summarize_bench(const std::vector<CostReport>& reports) {
  BenchSummary s;
  double roi_flops = -1;
  for (const auto& roi : reports) {
    if (roi.path != InjectionPath::roi || !roi.skipped.empty()) continue;
    const auto mask = std::find_if(reports.begin(), reports.end(), [&](const CostReport& r) {
      const auto &a = r.config, &b = roi.config;
      return r.path == InjectionPath::mask && a.h == b.h && a.w == b.w && a.r == b.r && a.n == b.n && a.c == b.c &&
             a.L == b.L;
    });
    if (mask == reports.end() || !mask->skipped.empty()) continue;
    if (roi_flops < 0) roi_flops = roi.flops.instance_attention;
    s.roi_flops_constant = s.roi_flops_constant && roi.flops.instance_attention == roi_flops;
    s.pixels.push_back(static_cast<double>(roi.config.h * roi.config.w));
    s.ratios.push_back(roi.ns_median / mask->ns_median);
  }
  for (std::size_t k = 1; k < s.ratios.size(); ++k)
    s.ratio_strictly_decreasing = s.ratio_strictly_decreasing && s.ratios[k] < s.ratios[k - 1];
  s.rho = s.ratios.size() >= 2 ? spearman(s.pixels, s.ratios) : 0.0;
  return s;
}

inline BenchOptions bench_options(const RunConfig& c) {
  BenchOptions o;
  o.grid = bench_grid(c);
  o.seed = c.train.seed;
  o.warmup = c.bench_warmup;
  o.runs = c.bench_runs;
  o.threads = c.threads;
  o.byte_budget = c.bench_budget_bytes;
  return o;
}

inline int cmd_bench(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  validate_config(c);
  prepare_output_dir(out_dir);
  echo_config(c, out_dir);
  const auto reports = run_bench(bench_options(c));
  {
    std::ofstream csv(out_dir / "bench.csv");
    write_bench_csv(csv, reports);
  }
  log << std::left << std::setw(6) << "path" << std::right << std::setw(6) << "h" << std::setw(6) << "w"
      << std::setw(16) << "flops" << std::setw(14) << "ms" << std::setw(14) << "peak MiB" << "\n";
  for (const auto& r : reports) {
    log << std::left << std::setw(6) << path_name(r.path) << std::right << std::setw(6) << r.config.h << std::setw(6)
        << r.config.w << std::setw(16) << std::setprecision(6) << r.flops.total();
    if (!r.skipped.empty()) {
      log << "  skipped: " << r.skipped << "\n";
      continue;
    }
    log << std::setw(14) << std::fixed << std::setprecision(3) << r.ns_median / 1e6 << std::setw(14)
        << static_cast<double>(r.bytes_peak) / (1 << 20) << "\n";
    log.unsetf(std::ios::fixed);
  }
  const auto s = summarize_bench(reports);
  for (std::size_t k = 0; k < s.ratios.size(); ++k)
    log << "h*w=" << s.pixels[k] << " roi/mask time ratio " << std::setprecision(4) << s.ratios[k] << "\n";
  log << "spearman(h*w, ratio) = " << s.rho << "\n";
  bool ok = true;
  if (!s.roi_flops_constant) {
    log << "FAIL roi-flops-constant: roi instance FLOPs vary with the canvas\n";
    ok = false;
  }
  if (s.ratios.size() >= 2 && !(s.rho < 0)) {
    log << "FAIL ratio-decreasing: roi/mask ratio does not fall as h*w grows\n";
    ok = false;
  }
  return ok ? kExitOk : kExitInvariant;
}

// --- train -----------------------------------------------------------------

template <class T>
void train_impl(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  double acc = 0;
  int count = 0;
  train_to_directory<T>(c.train, out_dir, [&](const StepLog& s) {
    acc += s.l_ldm;
    ++count;
    if ((s.step + 1) % 100 == 0 || s.step + 1 == c.train.steps) {
      log << "step " << s.step + 1 << "/" << c.train.steps << " l_ldm " << std::setprecision(5) << acc / count
          << " l_reg " << s.l_reg << "\n";
      log.flush();
      acc = 0;
      count = 0;
    }
  });
}

inline int cmd_train(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  validate_config(c);
  prepare_output_dir(out_dir);
  echo_config(c, out_dir);
  ThreadScope threads(c.threads);
  if (c.precision == Precision::f32) train_impl<float>(c, out_dir, log);
  else train_impl<double>(c, out_dir, log);
  log << "wrote " << (out_dir / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

template <class T>
BenchMetrics eval_impl(const RunConfig& c) {
  const auto model = load_checkpoint<T>(c.checkpoint);
  return evaluate_model(model, c.eval, model.config.schedule());
}

inline int cmd_eval(RunConfig c, const std::filesystem::path& out_dir, std::ostream& log) {
  require_checkpoint(c);
  adopt_checkpoint_model(c);
  validate_config(c);
  prepare_output_dir(out_dir);
  echo_config(c, out_dir);
  ThreadScope threads(c.threads);
  const auto m = c.precision == Precision::f32 ? eval_impl<float>(c) : eval_impl<double>(c);
  {
    std::ofstream csv(out_dir / "metrics.csv");
    write_metrics_csv(csv, "roictrl_bench", m);
  }
  const auto& o = m.overall();
  log << "scenes " << c.eval.scenes << " instances " << o.count << " mIoU " << std::setprecision(4) << o.miou
      << " acc_color " << o.acc_color << " acc_shape " << o.acc_shape << " success " << o.success_rate << "\n";
  return kExitOk;
}

// --- demo ------------------------------------------------------------------

/// Fixed gallery; the last layout is twice as wide as it is tall.
inline std::vector<LayoutSpec> demo_gallery(std::int64_t size) {
  auto inst = [](double x1, double y1, double x2, double y2, int color, ShapeKind shape) {
    return InstanceSpec{RoiBox::make(x1, y1, x2, y2), color, shape};
  };
  std::vector<LayoutSpec> g;
  auto add = [&](std::int64_t h, std::int64_t w, int bg, std::vector<InstanceSpec> in) {
    LayoutSpec l;
    l.height = h;
    l.width = w;
    l.background = bg;
    l.instances = std::move(in);
    g.push_back(std::move(l));
  };
  add(size, size, 0, {inst(0.25, 0.25, 0.75, 0.75, 1, ShapeKind::square)});
  add(size, size, 1, {inst(0.05, 0.3, 0.45, 0.7, 4, ShapeKind::circle), inst(0.55, 0.3, 0.95, 0.7, 2, ShapeKind::triangle)});
  add(size, size, 0,
      {inst(0.05, 0.05, 0.45, 0.45, 3, ShapeKind::square), inst(0.55, 0.05, 0.95, 0.45, 5, ShapeKind::circle),
       inst(0.05, 0.55, 0.45, 0.95, 6, ShapeKind::triangle), inst(0.55, 0.55, 0.95, 0.95, 7, ShapeKind::square)});
  add(size, size, 1,
      {inst(0.04, 0.08, 0.3, 0.34, 0, ShapeKind::circle), inst(0.37, 0.08, 0.63, 0.34, 1, ShapeKind::square),
       inst(0.7, 0.08, 0.96, 0.34, 2, ShapeKind::triangle), inst(0.04, 0.6, 0.3, 0.86, 3, ShapeKind::square),
       inst(0.37, 0.6, 0.63, 0.86, 4, ShapeKind::triangle), inst(0.7, 0.6, 0.96, 0.86, 5, ShapeKind::circle)});
  add(size, 2 * size, 0,
      {inst(0.03, 0.2, 0.28, 0.8, 1, ShapeKind::circle), inst(0.375, 0.2, 0.625, 0.8, 2, ShapeKind::square),
       inst(0.72, 0.2, 0.97, 0.8, 4, ShapeKind::triangle)});
  return g;
}

template <class T>
void demo_impl(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  const auto model = load_checkpoint<T>(c.checkpoint);
  const auto sched = model.config.schedule();
  const auto gallery = demo_gallery(model.config.image_size);
  std::vector<Tensor<double>> images(gallery.size());
  parallel_for(static_cast<std::int64_t>(gallery.size()), [&](std::int64_t k) {
    images[static_cast<std::size_t>(k)] = generate(model, gallery[static_cast<std::size_t>(k)], sched, c.eval.ddim_steps,
                                                   mix_seed(c.train.seed ^ (0xDE30ull << 32) ^ static_cast<std::uint64_t>(k)));
  });
  std::ofstream index(out_dir / "gallery.txt");
  for (std::size_t k = 0; k < gallery.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "demo_%02zu", k);
    write_ppm((out_dir / (std::string(name) + ".ppm")).string(), images[k]);
    write_ppm((out_dir / (std::string(name) + "_layout.ppm")).string(), render_scene(gallery[k]).image);
    index << name << " " << gallery[k].height << "x" << gallery[k].width;
    for (const auto& in : gallery[k].instances)
      index << " | " << in.describe() << " [" << in.box.x1 << "," << in.box.y1 << "," << in.box.x2 << "," << in.box.y2
            << "]";
    index << "\n";
    log << "wrote " << name << ".ppm (" << gallery[k].height << "x" << gallery[k].width << ")\n";
  }
}

inline int cmd_demo(RunConfig c, const std::filesystem::path& out_dir, std::ostream& log) {
  require_checkpoint(c);
  adopt_checkpoint_model(c);
  validate_config(c);
  prepare_output_dir(out_dir);
  echo_config(c, out_dir);
  ThreadScope threads(c.threads);
  if (c.precision == Precision::f32) demo_impl<float>(c, out_dir, log);
  else demo_impl<double>(c, out_dir, log);
  return kExitOk;
}

}  // namespace roictrl
