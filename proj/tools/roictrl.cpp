#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "roictrl/commands.hpp"

using namespace roictrl;

namespace {

struct Flags {
  std::string config, out, checkpoint, precision, filter;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::vector<std::string> ablate;
  bool flip_unpool_vjp = false;
};

void add_run_flags(CLI::App* cmd, Flags& f, const std::string& default_out) {
  f.out = default_out;
  cmd->add_option("--config", f.config, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--out", f.out, "output directory")->capture_default_str();
  cmd->add_option("--ablate", f.ablate, "ablation switch (repeatable)")
      ->check(CLI::IsMember(known_ablations()));
  cmd->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

RunConfig build_config(const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) load_config_file(c, f.config);
  if (f.seed) c.train.seed = *f.seed;
  if (f.threads) c.threads = *f.threads;
  if (!f.precision.empty()) set_config_value(c, "precision", f.precision, "--precision: ");
  for (const auto& a : f.ablate) apply_ablation(c, a);
  if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
  validate_config(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-of-interest layout control: verification, benchmark, toy training and evaluation"};
  app.require_subcommand(1);
  Flags f;

  auto* verify = app.add_subcommand("verify", "run the property suite and print a pass/fail table");
  verify->add_option("--filter", f.filter, "module prefix or property name, comma separated");
  verify->add_flag("--inject-unpool-vjp-sign-flip", f.flip_unpool_vjp, "mutation test: corrupt the unpool backward")
      ->group("");
  auto* bench = app.add_subcommand("bench", "mask path vs roi path cost sweep");
  add_run_flags(bench, f, "runs/bench");
  auto* train = app.add_subcommand("train", "train the toy layout-conditioned model");
  add_run_flags(train, f, "runs/train");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the held-out benchmark");
  add_run_flags(eval, f, "runs/eval");
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint to evaluate");
  auto* demo = app.add_subcommand("demo", "render the fixed demo gallery from a checkpoint");
  add_run_flags(demo, f, "runs/demo");
  demo->add_option("--checkpoint", f.checkpoint, "checkpoint to sample from");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (verify->parsed()) {
      testing::unpool_vjp_sign_flip() = f.flip_unpool_vjp;
      return cmd_verify(f.filter, std::cout);
    }
    const RunConfig c = build_config(f);
    if (bench->parsed()) return cmd_bench(c, f.out, std::cout);
    if (train->parsed()) return cmd_train(c, f.out, std::cout);
    if (eval->parsed()) return cmd_eval(c, f.out, std::cout);
    if (demo->parsed()) return cmd_demo(c, f.out, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitUsage;
}
