// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 3 9 10     selected criteria
//
// Criteria 7 and 8 train nine models (three seeds of the default run and of
// two ablations). Finished runs are cached under ROICTRL_ACCEPTANCE_DIR
// (default: <build>/acceptance_runs) and reused when their echoed
// configuration matches.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "roictrl/commands.hpp"
#include "roictrl/verify.hpp"

#ifndef ROICTRL_ACCEPTANCE_DEFAULT_DIR
#define ROICTRL_ACCEPTANCE_DEFAULT_DIR "acceptance_runs"
#endif

using namespace roictrl;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool ok = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

/// Runs named properties, all of which must pass; limit_s <= 0 means untimed.
Verdict properties_within(const std::vector<std::string>& names, double limit_s = 0) {
  const auto t0 = Clock::now();
  for (const auto& p : verify::all_properties()) {
    if (std::find(names.begin(), names.end(), p.name) == names.end()) continue;
    const auto r = verify::run_property(p);
    if (!r.ok) return {false, r.name + ": " + r.detail};
  }
  const double s = seconds_since(t0);
  std::string list;
  for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
  if (limit_s <= 0) return {true, list};
  if (s >= limit_s) return {false, list + " took " + fmt(s) + " s (limit " + fmt(limit_s) + " s)"};
  return {true, list + " in " + fmt(s, 3) + " s (limit " + fmt(limit_s) + " s)"};
}

// --- 1-6, 9, 10 ------------------------------------------------------------

Verdict oracle_equivalence() { return properties_within({"align-oracle", "unpool-oracle", "adjointness"}, 10.0); }

Verdict gradient_suite() {
  return properties_within({"op-gradients", "cross-attention-gradients", "roi-self-attention-gradients",
                            "box-guidance-gradients", "embedding-injection-gradients", "blend-gradients",
                            "model-gradients"},
                           60.0);
}

Verdict round_trips() { return properties_within({"round-trip", "affine-reproduction"}); }

Verdict roi_size_schedule() {
  const std::int64_t sides[] = {64, 32, 16, 8}, want[] = {25, 19, 13, 7};
  std::string got;
  bool ok = true;
  for (int k = 0; k < 4; ++k) {
    ok = ok && roi_size(sides[k]) == want[k];
    got += (k ? ", " : "") + std::to_string(sides[k]) + "->" + std::to_string(roi_size(sides[k]));
  }
  return {ok, got};
}

Verdict quantization_demo() { return properties_within({"quantization-band", "mask-path-footprint"}); }

Verdict efficiency_scaling() {
  const auto t0 = Clock::now();
  BenchOptions o;
  o.grid = default_bench_grid();
  const auto reports = run_bench(o);
  const double s = seconds_since(t0);
  const auto sum = summarize_bench(reports);
  std::string ratios;
  for (double r : sum.ratios) ratios += (ratios.empty() ? "" : " > ") + fmt(r, 3);
  const bool complete = sum.ratios.size() == o.grid.size();
  const bool ok = complete && sum.roi_flops_constant && sum.ratio_strictly_decreasing && s < 300.0;
  std::string d = "roi/mask time ratio " + ratios + "; roi instance FLOPs " +
                  (sum.roi_flops_constant ? "constant" : "NOT constant") + "; bench " + fmt(s, 3) + " s (limit 300 s)";
  if (!complete) d += "; some configs skipped";
  return {ok, d};
}

Verdict blend_invariants() {
  return properties_within({"partition-of-unity", "outside-footprint-identity", "reg-endpoints"});
}

Verdict hungarian() { return properties_within({"hungarian-bruteforce"}, 5.0); }

// --- 7, 8 ------------------------------------------------------------------

struct RunMetrics {
  double miou = 0, color = 0;
};

fs::path run_root() {
  const char* env = std::getenv("ROICTRL_ACCEPTANCE_DIR");
  return env != nullptr && *env != 0 ? fs::path(env) : fs::path(ROICTRL_ACCEPTANCE_DEFAULT_DIR);
}

RunConfig run_config(const std::string& variant, std::uint64_t seed) {
  RunConfig c;
  c.train.seed = seed;
  c.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (variant != "default") apply_ablation(c, variant);
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Overall row of a metrics.csv written by `eval`.
bool read_overall(const fs::path& csv, RunMetrics& m) {
  std::ifstream is(csv);
  std::string line;
  if (!std::getline(is, line) || !std::getline(is, line)) return false;
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
  if (f.size() < 7 || f[1] != "all" || f[2] != "all") return false;
  m.miou = std::stod(f[3]);
  m.color = std::stod(f[4]);
  return true;
}

/// True when `dir` holds a training run of `c`. Thread count does not
/// affect results, so it is not part of the key.
bool trained_with(const fs::path& dir, const RunConfig& c) {
  if (!fs::exists(dir / "checkpoint.bin") || !fs::exists(dir / "config.txt")) return false;
  try {
    RunConfig cached;
    parse_config_text(cached, read_file(dir / "config.txt"));
    cached.threads = c.threads;
    cached.checkpoint = c.checkpoint;
    return effective_config_text(cached) == effective_config_text(c);
  } catch (const ConfigError&) {
    return false;
  }
}

bool newer_or_same(const fs::path& a, const fs::path& b) {
  std::error_code ea, eb;
  const auto ta = fs::last_write_time(a, ea), tb = fs::last_write_time(b, eb);
  return !ea && !eb && ta >= tb;
}

/// Trains and evaluates one (variant, seed) unless a matching run is cached.
RunMetrics ensure_run(const std::string& variant, std::uint64_t seed) {
  const fs::path dir = run_root() / (variant + "_seed" + std::to_string(seed));
  const fs::path train_dir = dir / "train", eval_dir = dir / "eval";
  RunConfig c = run_config(variant, seed);
  RunMetrics m;
  const bool trained = trained_with(train_dir, c);
  if (trained && newer_or_same(eval_dir / "metrics.csv", train_dir / "checkpoint.bin") &&
      read_overall(eval_dir / "metrics.csv", m)) {
    std::cout << "  [cached] " << dir.string() << ": mIoU " << fmt(m.miou) << " color " << fmt(m.color) << "\n";
    return m;
  }
  const auto t0 = Clock::now();
  std::ostringstream quiet;
  if (!trained) {
    std::cout << "  training " << variant << " seed " << seed << " into " << train_dir.string() << std::endl;
    if (cmd_train(c, train_dir, quiet) != kExitOk) throw std::runtime_error("training failed for " + dir.string());
  }
  std::cout << "  evaluating " << variant << " seed " << seed << std::endl;
  c.checkpoint = (train_dir / "checkpoint.bin").string();
  if (cmd_eval(c, eval_dir, quiet) != kExitOk || !read_overall(eval_dir / "metrics.csv", m))
    throw std::runtime_error("evaluation failed for " + dir.string());
  std::cout << "  done in " << fmt(seconds_since(t0), 4) << " s: mIoU " << fmt(m.miou) << " color " << fmt(m.color)
            << std::endl;
  return m;
}

Verdict training_outcome() {
  const auto m = ensure_run("default", 0);
  const bool ok = m.miou >= 0.70 && m.color >= 0.80;
  return {ok, "default seed 0: mIoU " + fmt(m.miou) + " (>= 0.70), color accuracy " + fmt(m.color) + " (>= 0.80)"};
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

/// Sample standard deviation.
double stdev(const std::vector<double>& v) {
  const double mu = mean(v);
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / (v.size() - 1));
}

Verdict ablation_directionality() {
  const std::uint64_t seeds[] = {0, 1, 2};
  std::map<std::string, std::vector<RunMetrics>> runs;
  for (auto s : seeds)
    for (const char* v : {"default", "no-self-attn", "no-reg"}) runs[v].push_back(ensure_run(v, s));
  auto field = [&](const std::string& v, double RunMetrics::*f) {
    std::vector<double> out;
    for (const auto& m : runs[v]) out.push_back(m.*f);
    return out;
  };
  // margin must exceed the larger of the two across-seed deviations
  const auto d_miou = field("default", &RunMetrics::miou), a_miou = field("no-self-attn", &RunMetrics::miou);
  const auto d_col = field("default", &RunMetrics::color), a_col = field("no-reg", &RunMetrics::color);
  const double drop_miou = mean(d_miou) - mean(a_miou), sd_miou = std::max(stdev(d_miou), stdev(a_miou));
  const double drop_col = mean(d_col) - mean(a_col), sd_col = std::max(stdev(d_col), stdev(a_col));
  const bool ok_a = drop_miou > sd_miou, ok_b = drop_col > sd_col;
  std::string d = "(a) no-self-attn mIoU " + fmt(mean(a_miou)) + " vs " + fmt(mean(d_miou)) + ", drop " +
                  fmt(drop_miou) + (ok_a ? " > " : " <= ") + "std " + fmt(sd_miou) + "; (b) no-reg color " +
                  fmt(mean(a_col)) + " vs " + fmt(mean(d_col)) + ", drop " + fmt(drop_col) + (ok_b ? " > " : " <= ") +
                  "std " + fmt(sd_col);
  return {ok_a && ok_b, d};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Verdict()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "oracle-equivalence", oracle_equivalence},
      {2, "gradient-suite", gradient_suite},
      {3, "round-trip-identities", round_trips},
      {4, "roi-size-schedule", roi_size_schedule},
      {5, "quantization-error", quantization_demo},
      {6, "efficiency-scaling", efficiency_scaling},
      {7, "training-outcome", training_outcome},
      {8, "ablation-directionality", ablation_directionality},
      {9, "blend-invariants", blend_invariants},
      {10, "hungarian-bruteforce", hungarian},
  };
  std::vector<int> selected;
  for (int k = 1; k < argc; ++k) selected.push_back(std::atoi(argv[k]));
  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.ok ? "PASS" : "FAIL") << "  " << std::setw(2) << c.id << "  " << std::left << std::setw(26)
              << c.name << std::right << v.detail << std::endl;
    failures += v.ok ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
