#include "lsr1/cli.hpp"

#include <CLI11/CLI11.hpp>

#include <iostream>
#include <stdexcept>

namespace {

void add_config_options(CLI::App& cmd, lsr1::RunOptions& o) {
  cmd.add_option("--preset", o.config.preset, "Named configuration from the presets directory");
  cmd.add_option("--config", o.config.file, "JSON configuration file, applied over the preset");
  cmd.add_option("--set", o.config.overrides, "Override one field, e.g. --set metatrain.lr=1e-3");
  cmd.add_option("--run-name", o.run_name, "Run directory name under the output root");
  cmd.add_option("--jobs", o.jobs, "Worker threads (results do not depend on this)")->check(CLI::PositiveNumber);
  cmd.add_flag("--quiet", o.quiet, "Suppress progress lines");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned SR1 optimizer: meta-training, traces and performance profiles"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", std::string(lsr1::kLibraryVersion));
  bool list = false;
  app.add_flag("--list-presets", list, "Print the available presets and exit");

  lsr1::RunOptions train_opts;
  std::optional<std::filesystem::path> resume;
  CLI::App* train = app.add_subcommand("train", "Meta-train a model and evaluate it on the test set");
  add_config_options(*train, train_opts);
  train->add_option("--resume", resume, "Continue from a checkpoint written by an earlier run")->check(CLI::ExistingFile);

  lsr1::TraceOptions trace_opts;
  std::string cosine_mode = "displacement";
  CLI::App* trace = app.add_subcommand("trace", "Record one optimization trajectory as CSV");
  auto* ck = trace->add_option("--checkpoint", trace_opts.checkpoint, "Trained model to run")->check(CLI::ExistingFile);
  trace->add_option("--solver", trace_opts.solver, "Classical solver to run")->excludes(ck);
  trace->add_option("--objective", trace_opts.objective, "quadratic, rosenbrock or rastrigin")->capture_default_str();
  trace->add_option("--dim", trace_opts.dim, "Problem dimension")->capture_default_str()->check(CLI::PositiveNumber);
  trace->add_option("--cond", trace_opts.cond, "Diagonal quadratic with this condition number");
  trace->add_option("--max-cond", trace_opts.max_cond, "Resample random quadratics above this condition number");
  trace->add_option("--x0", trace_opts.x0, "Initial point, comma separated (use --x0=-1,1 for negatives)")
      ->delimiter(',');
  trace->add_option("--seed", trace_opts.seed, "Seed for the problem and initial point")->capture_default_str();
  trace->add_option("--steps", trace_opts.steps, "Number of iterations")->capture_default_str();
  trace->add_option("--buffer", trace_opts.buffer, "Vector buffer size (L-BFGS memory for lbfgs)");
  trace->add_option("--lr", trace_opts.lr, "Learning rate for classical solvers");
  trace->add_option("--cosine-mode", cosine_mode, "displacement or raw")->capture_default_str();
  trace->add_option("--output", trace_opts.output, "CSV path; default is a new run directory");
  trace->add_option("--run-name", trace_opts.run_name, "Run directory name under the output root");
  trace->add_option("--output-root", trace_opts.output_root, "Directory for run directories");

  lsr1::RunOptions profile_opts;
  std::optional<double> tau_max;
  CLI::App* profile = app.add_subcommand("profile", "Benchmark solvers and write performance profiles");
  add_config_options(*profile, profile_opts);
  profile->add_option("--tau-max", tau_max, "Upper end of the profile axis");

  std::filesystem::path inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect", "Describe a checkpoint file");
  inspect->add_option("checkpoint", inspect_path, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? lsr1::kExitOk : lsr1::kExitUsage;
  }
  if (!list && app.get_subcommands().empty()) {
    std::cerr << app.help();
    return lsr1::kExitUsage;
  }

  try {
    if (list) {
      for (const std::string& p : lsr1::list_presets()) std::cout << p << '\n';
      return lsr1::kExitOk;
    }
    if (train->parsed()) return lsr1::cmd_train(train_opts, resume);
    if (trace->parsed()) {
      trace_opts.cosine_mode = lsr1::parse_cosine_mode(cosine_mode);
      return lsr1::cmd_trace(trace_opts);
    }
    if (profile->parsed()) return lsr1::cmd_profile(profile_opts, tau_max);
    if (inspect->parsed()) return lsr1::cmd_inspect(inspect_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lsr1::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lsr1::kExitRuntime;
  }
  return lsr1::kExitUsage;
}
