#pragma once

// Flat key = value run configuration. '#' starts a comment; blank lines are
// ignored; every key must be known.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "roictrl/bench.hpp"
#include "roictrl/evaluate.hpp"
#include "roictrl/train.hpp"

namespace roictrl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

struct RunConfig {
  TrainOptions train;
  BenchmarkOptions eval;
  BenchConfig bench;  ///< h and w come from bench_sizes
  std::vector<std::int64_t> bench_sizes{32, 64, 128, 256};
  int bench_runs = 5, bench_warmup = 2;
  std::int64_t bench_budget_bytes = std::int64_t{2} << 30;
  int threads = 1;
  Precision precision = Precision::f32;
  std::vector<std::string> ablations;  ///< already applied to the fields above
  std::string checkpoint;              ///< model read by eval and demo

  RunConfig() {
    train.adam.lr = 1e-3;
    train.steps = 5000;
    train.batch = 2;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& v, const std::string& where) {
  N out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(where + "invalid value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v, const std::string& where) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError(where + "expected a boolean for " + key + ", got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& known_ablations() {
  static const std::vector<std::string> names{"no-self-attn", "no-reg", "local-coord", "single-scale"};
  return names;
}

/// Switches one ablation on.
inline void apply_ablation(RunConfig& c, const std::string& name) {
  if (name == "no-self-attn") c.train.model.self_attention = false;
  else if (name == "no-reg") c.train.alpha = 0;
  else if (name == "local-coord") c.train.model.frame = CoordinateFrame::local;
  else if (name == "single-scale") c.train.model.single_scale = true;
  else throw ConfigError("unknown ablation '" + name + "'");
  for (const auto& a : c.ablations)
    if (a == name) return;
  c.ablations.push_back(name);
}

/// Sets one key. `where` prefixes error messages (e.g. "file:3: ").
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& v,
                             const std::string& where = "") {
  using detail::parse_bool;
  using detail::parse_number;
  auto i64 = [&] { return parse_number<std::int64_t>(key, v, where); };
  auto i32 = [&] { return parse_number<int>(key, v, where); };
  auto u64 = [&] { return parse_number<std::uint64_t>(key, v, where); };
  auto f64 = [&] { return parse_number<double>(key, v, where); };
  auto& m = c.train.model;
  if (key == "image_size") m.image_size = i64();
  else if (key == "c_hi") m.c_hi = i64();
  else if (key == "c_lo") m.c_lo = i64();
  else if (key == "text_dim") m.text_dim = i64();
  else if (key == "temb_dim") m.temb_dim = i64();
  else if (key == "self_attention") m.self_attention = parse_bool(key, v, where);
  else if (key == "single_scale") m.single_scale = parse_bool(key, v, where);
  else if (key == "coord") {
    if (v == "global") m.frame = CoordinateFrame::global;
    else if (v == "local") m.frame = CoordinateFrame::local;
    else throw ConfigError(where + "coord must be global or local, got '" + v + "'");
  } else if (key == "seed") c.train.seed = u64();
  else if (key == "steps") c.train.steps = i32();
  else if (key == "batch") c.train.batch = i32();
  else if (key == "lr") c.train.adam.lr = f64();
  else if (key == "beta1") c.train.adam.beta1 = f64();
  else if (key == "beta2") c.train.adam.beta2 = f64();
  else if (key == "grad_clip") c.train.adam.grad_clip = f64();
  else if (key == "alpha") c.train.alpha = f64();
  else if (key == "timesteps") m.timesteps = i32();
  else if (key == "beta_start") m.beta_start = f64();
  else if (key == "beta_end") m.beta_end = f64();
  else if (key == "output") {
    if (v == "velocity") m.velocity_output = true;
    else if (v == "epsilon") m.velocity_output = false;
    else throw ConfigError(where + "output must be velocity or epsilon, got '" + v + "'");
  }
  else if (key == "min_instances") c.train.min_instances = i32();
  else if (key == "max_instances") c.train.max_instances = i32();
  else if (key == "eval_scenes") c.eval.scenes = i32();
  else if (key == "eval_seed") c.eval.seed = u64();
  else if (key == "eval_min_instances") c.eval.min_instances = i32();
  else if (key == "eval_max_instances") c.eval.max_instances = i32();
  else if (key == "ddim_steps") c.eval.ddim_steps = i32();
  else if (key == "bench_sizes") {
    c.bench_sizes.clear();
    for (const auto& s : detail::split_list(v)) c.bench_sizes.push_back(parse_number<std::int64_t>(key, s, where));
  } else if (key == "bench_r") c.bench.r = i64();
  else if (key == "bench_n") c.bench.n = i64();
  else if (key == "bench_c") c.bench.c = i64();
  else if (key == "bench_L") c.bench.L = i64();
  else if (key == "bench_runs") c.bench_runs = i32();
  else if (key == "bench_warmup") c.bench_warmup = i32();
  else if (key == "bench_budget_bytes") c.bench_budget_bytes = i64();
  else if (key == "threads") c.threads = i32();
  else if (key == "precision") {
    if (v == "f32") c.precision = Precision::f32;
    else if (v == "f64") c.precision = Precision::f64;
    else throw ConfigError(where + "precision must be f32 or f64, got '" + v + "'");
  } else if (key == "checkpoint") {
    c.checkpoint = v;
  } else if (key == "ablate") {
    for (const auto& a : detail::split_list(v)) {
      try {
        apply_ablation(c, a);
      } catch (const ConfigError& e) {
        throw ConfigError(where + e.what());
      }
    }
  } else {
    throw ConfigError(where + "unknown key '" + key + "'");
  }
}

/// Applies `text` on top of `c`; later lines win.
inline void parse_config_text(RunConfig& c, const std::string& text, const std::string& source = "config") {
  std::istringstream is(text);
  std::string line;
  for (int no = 1; std::getline(is, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    set_config_value(c, key, value, where);
  }
}

inline void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  parse_config_text(c, ss.str(), path);
}

/// Rejects values no command can run with.
inline void validate_config(const RunConfig& c) {
  const auto& m = c.train.model;
  if (m.image_size < 8 || m.image_size % 2 != 0) throw ConfigError("image_size must be even and >= 8");
  if (m.c_hi < 1 || m.c_lo < 1 || m.text_dim < 1 || m.temb_dim < 2 || m.temb_dim % 2 != 0) {
    throw ConfigError("model widths must be positive (temb_dim even)");
  }
  if (c.train.steps < 0 || c.train.batch < 1) throw ConfigError("steps must be >= 0 and batch >= 1");
  if (!(c.train.adam.lr > 0)) throw ConfigError("lr must be > 0");
  if (c.train.alpha < 0) throw ConfigError("alpha must be >= 0");
  if (c.train.model.timesteps < 2) throw ConfigError("timesteps must be >= 2");
  if (c.train.min_instances < 0 || c.train.max_instances < c.train.min_instances) {
    throw ConfigError("need 0 <= min_instances <= max_instances");
  }
  if (c.eval.scenes < 1 || c.eval.ddim_steps < 1 || c.eval.ddim_steps > c.train.model.timesteps) {
    throw ConfigError("eval_scenes >= 1 and 1 <= ddim_steps <= timesteps required");
  }
  if (c.eval.min_instances < 0 || c.eval.max_instances < c.eval.min_instances) {
    throw ConfigError("need 0 <= eval_min_instances <= eval_max_instances");
  }
  if (c.bench_sizes.empty()) throw ConfigError("bench_sizes must not be empty");
  for (auto s : c.bench_sizes)
    if (s < 1) throw ConfigError("bench_sizes must be positive");
  if (c.bench.r < 1 || c.bench.n < 0 || c.bench.c < 1 || c.bench.L < 1) throw ConfigError("bench extents must be positive");
  if (c.bench_runs < 5 || c.bench_warmup < 0) throw ConfigError("bench_runs must be >= 5");
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
}

/// Every key with its effective value. Parsing this text over the defaults
/// reproduces the configuration.
inline std::string effective_config_text(const RunConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto& m = c.train.model;
  os << "# effective configuration\n";
  os << "image_size = " << m.image_size << "\nc_hi = " << m.c_hi << "\nc_lo = " << m.c_lo
     << "\ntext_dim = " << m.text_dim << "\ntemb_dim = " << m.temb_dim << "\nself_attention = " << m.self_attention
     << "\nsingle_scale = " << m.single_scale << "\ncoord = " << (m.frame == CoordinateFrame::global ? "global" : "local")
     << "\noutput = " << (m.velocity_output ? "velocity" : "epsilon") << "\ntimesteps = " << m.timesteps
     << "\nbeta_start = " << m.beta_start << "\nbeta_end = " << m.beta_end << "\n";
  const auto& t = c.train;
  os << "seed = " << t.seed << "\nsteps = " << t.steps << "\nbatch = " << t.batch << "\nlr = " << t.adam.lr
     << "\nbeta1 = " << t.adam.beta1 << "\nbeta2 = " << t.adam.beta2 << "\ngrad_clip = " << t.adam.grad_clip
     << "\nalpha = " << t.alpha << "\nmin_instances = " << t.min_instances
     << "\nmax_instances = " << t.max_instances << "\n";
  os << "eval_scenes = " << c.eval.scenes << "\neval_seed = " << c.eval.seed
     << "\neval_min_instances = " << c.eval.min_instances << "\neval_max_instances = " << c.eval.max_instances
     << "\nddim_steps = " << c.eval.ddim_steps << "\n";
  os << "bench_sizes = ";
  for (std::size_t k = 0; k < c.bench_sizes.size(); ++k) os << (k ? "," : "") << c.bench_sizes[k];
  os << "\nbench_r = " << c.bench.r << "\nbench_n = " << c.bench.n << "\nbench_c = " << c.bench.c
     << "\nbench_L = " << c.bench.L << "\nbench_runs = " << c.bench_runs << "\nbench_warmup = " << c.bench_warmup
     << "\nbench_budget_bytes = " << c.bench_budget_bytes << "\n";
  os << "threads = " << c.threads << "\nprecision = " << (c.precision == Precision::f32 ? "f32" : "f64") << "\n";
  if (!c.checkpoint.empty()) os << "checkpoint = " << c.checkpoint << "\n";
  if (!c.ablations.empty()) {
    os << "ablate = ";
    for (std::size_t k = 0; k < c.ablations.size(); ++k) os << (k ? "," : "") << c.ablations[k];
    os << "\n";
  }
  return os.str();
}

inline std::vector<BenchConfig> bench_grid(const RunConfig& c) {
  std::vector<BenchConfig> g;
  for (auto s : c.bench_sizes) {
    BenchConfig b = c.bench;
    b.h = b.w = s;
    g.push_back(b);
  }
  return g;
}

}  // namespace roictrl
