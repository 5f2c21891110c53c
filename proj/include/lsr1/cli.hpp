// Subcommands behind the lsr1 executable: train, trace, profile, inspect.
// Argument parsing lives in tools/lsr1.cpp; these functions take parsed
// options, write artifacts under a run directory and return an exit code.
#pragma once

#include "lsr1/baselines.hpp"
#include "lsr1/checkpoint.hpp"
#include "lsr1/config.hpp"
#include "lsr1/csv.hpp"
#include "lsr1/eval.hpp"
#include "lsr1/lsr1.hpp"
#include "lsr1/metatrain.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace lsr1 {

inline constexpr int kArtifactVersion = 1;
inline constexpr std::string_view kLibraryVersion = "0.1.0";

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct ConfigOptions {
  std::optional<std::string> preset;
  std::optional<std::filesystem::path> file;
  std::vector<std::string> overrides;
};

struct RunOptions {
  ConfigOptions config;
  std::optional<std::string> run_name;
  int jobs = 1;
  bool quiet = false;
};

inline RunConfig load_run_config(const ConfigOptions& o) {
  return parse_config(compose_config(o.preset, o.file, o.overrides));
}

/// Output root: $LSR1_OUTPUT_ROOT when set, else the config's output_dir.
inline std::filesystem::path output_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("LSR1_OUTPUT_ROOT"); env && *env) return env;
  return cfg.output_dir;
}

/// <root>/<run_name>, or <root>/<command>-<UTC timestamp> with a numeric suffix if taken.
inline std::filesystem::path make_run_dir(const RunConfig& cfg, std::string_view command,
                                          const std::optional<std::string>& run_name) {
  namespace fs = std::filesystem;
  const fs::path root = output_root(cfg);
  fs::path dir;
  if (run_name) {
    if (run_name->empty() || run_name->find('/') != std::string::npos) {
      throw ConfigError("--run-name", "must be a non-empty name without '/'");
    }
    dir = root / *run_name;
  } else {
    const std::time_t now = std::time(nullptr);
    std::tm utc{};
    gmtime_r(&now, &utc);
    std::ostringstream name;
    name << command << '-' << std::put_time(&utc, "%Y%m%d-%H%M%S");
    dir = root / name.str();
    for (int i = 1; fs::exists(dir); ++i) dir = root / (name.str() + "-" + std::to_string(i));
  }
  fs::create_directories(dir);
  return dir;
}

inline json run_meta(std::string_view command, const RunConfig& cfg) {
  json meta;
  meta["command"] = std::string(command);
  meta["artifact_version"] = kArtifactVersion;
  meta["library_version"] = std::string(kLibraryVersion);
  meta["checkpoint_version"] = kCheckpointVersion;
  meta["config"] = to_json(cfg);
  meta["seeds"] = meta["config"]["seeds"];
  return meta;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) { write_file_atomic(path, text); }

inline std::string config_text(const RunConfig& cfg) { return to_json(cfg).dump(); }

// ---------------------------------------------------------------------------
// train

inline std::string describe_training(const RunConfig& cfg) {
  std::ostringstream s;
  s << "K=" << cfg.metatrain.unroll << " L=" << cfg.lsr1.buffer << " lambda_sec=" << format_double(cfg.metatrain.secant_weight)
    << " lr=" << format_double(cfg.metatrain.lr) << " batch=" << cfg.metatrain.batch
    << " iterations=" << cfg.metatrain.iterations << " gamma1=" << format_double(cfg.lsr1.gamma1)
    << " gamma2=" << format_double(cfg.lsr1.gamma2) << " hidden=" << cfg.model.hidden
    << " N=" << cfg.train_objectives.spec.dim << " objective=" << to_string(cfg.train_objectives.spec.kind);
  return s.str();
}

struct TrainOutcome {
  TrainResult result;
  TestCurve test;
};

/// Meta-trains per `cfg`, then evaluates the best-validation model on the test set.
inline TrainOutcome train_and_test(const RunConfig& cfg, const std::filesystem::path& dir, int jobs,
                                   std::ostream* progress, const std::optional<std::filesystem::path>& resume = {}) {
  MetaConfig meta = cfg.meta();
  meta.jobs = jobs;
  TrainOptions opts;
  opts.output_dir = dir;
  opts.resume_from = resume;
  opts.config_text = config_text(cfg);
  if (progress) {
    opts.on_record = [progress](const MetaRecord& r) {
      *progress << "iter " << r.iteration << " train_loss " << format_double(r.train_loss) << " val_loss "
                << format_double(r.val_loss) << " val_final_f " << format_double(r.val_final_value)
                << " val_secant_residual " << format_double(r.val_residual)
                << (r.val_diverged ? " val_diverged " + std::to_string(r.val_diverged) : std::string()) << '\n'
                << std::flush;
    };
  }
  TrainOutcome out;
  out.result = train(meta, cfg.model_config(), opts);

  LsrOneConfig test_lsr1 = cfg.lsr1;
  test_lsr1.buffer = cfg.test_objectives.buffer;
  const ObjectiveBatch test = make_batch(cfg.test_objectives.spec, static_cast<std::size_t>(cfg.test_objectives.size),
                                         cfg.seeds.test);
  out.test = evaluate_model(out.result.best_model, test_lsr1, test, cfg.test_objectives.steps, cfg.eval.cosine_mode, jobs);
  std::ostringstream csv;
  write_test_curve_csv(csv, out.test);
  write_text(dir / "test_curve.csv", csv.str());
  return out;
}

inline int cmd_train(const RunOptions& opts, const std::optional<std::filesystem::path>& resume = {},
                     std::ostream& out = std::cout) {
  const RunConfig cfg = load_run_config(opts.config);
  const auto dir = make_run_dir(cfg, "train", opts.run_name);
  out << "config: " << describe_training(cfg) << '\n' << "run directory: " << dir.string() << '\n';
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  const TrainOutcome res = train_and_test(cfg, dir, opts.jobs, opts.quiet ? nullptr : &out, resume);
  json meta = run_meta("train", cfg);
  meta["best_iteration"] = res.result.best_iteration;
  meta["test_steps"] = cfg.test_objectives.steps;
  write_text(dir / "run_meta.json", meta.dump(2) + "\n");
  out << "best iteration " << res.result.best_iteration << " val_loss " << format_double(res.result.best_val_loss)
      << "; test mean final f " << format_double(res.test.mean_final()) << " (" << res.test.diverged
      << " diverged)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// trace

struct TraceOptions {
  std::optional<std::filesystem::path> checkpoint;  // learned solver
  std::optional<std::string> solver;                // classical solver
  std::string objective = "quadratic";
  Eigen::Index dim = 2;
  std::optional<double> cond;  // diagonal quadratic when set
  std::optional<double> max_cond = 1000.0;
  std::optional<std::vector<double>> x0;
  std::uint64_t seed = 0;
  int steps = 20;
  std::optional<int> buffer;
  std::optional<double> lr;
  CosineMode cosine_mode = CosineMode::displacement;
  std::optional<std::filesystem::path> output;  // defaults to <run dir>/trace.csv
  std::optional<std::string> run_name;
  std::optional<std::string> output_root;
};

struct TraceRow {
  int k = 0;
  double f = 0.0;
  double grad_norm = 0.0;
  std::optional<double> secant_residual;
  std::optional<double> cosine;
  Vector x;
};

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
  CsvWriter csv(out);
  std::vector<std::string> header = {"k", "f", "grad_norm", "secant_residual", "cosine"};
  const Eigen::Index n = rows.empty() ? 0 : rows.front().x.size();
  for (Eigen::Index i = 0; i < n; ++i) header.push_back("x" + std::to_string(i));
  csv.header(header);
  for (const TraceRow& r : rows) {
    csv.cell(r.k).cell(r.f).cell(r.grad_norm);
    r.secant_residual ? csv.cell(*r.secant_residual) : csv.cell("");
    r.cosine ? csv.cell(*r.cosine) : csv.cell("");
    for (Eigen::Index i = 0; i < n; ++i) csv.cell(r.x(i));
    csv.end_row();
  }
}

/// Objective and start point for a trace: explicit x0 or a draw from `seed`.
inline std::pair<ObjectivePtr, Vector> trace_problem(const TraceOptions& o) {
  ProblemSpec spec;
  spec.kind = parse_objective_kind(o.objective);
  spec.dim = o.dim;
  spec.diagonal_cond = o.cond;
  spec.max_cond = o.max_cond;
  if (spec.kind != ObjectiveKind::quadratic && o.cond) {
    throw ConfigError("--cond", "only applies to quadratic objectives");
  }
  const ObjectiveBatch one = make_batch(spec, 1, o.seed);
  Vector x0 = one.initial_points[0];
  if (o.x0) {
    if (static_cast<Eigen::Index>(o.x0->size()) != o.dim) {
      throw ConfigError("--x0", "has " + std::to_string(o.x0->size()) + " coordinates but --dim is " +
                                    std::to_string(o.dim));
    }
    x0 = Eigen::Map<const Vector>(o.x0->data(), o.dim);
  }
  return {one.objectives[0], x0};
}

inline std::vector<TraceRow> trace_rows(const TraceOptions& o) {
  if (o.checkpoint.has_value() == o.solver.has_value()) {
    throw ConfigError("trace", "give exactly one of --checkpoint or --solver");
  }
  if (o.steps < 1) throw ConfigError("--steps", "must be >= 1");
  const auto [obj, x0] = trace_problem(o);
  std::vector<TraceRow> rows;
  rows.push_back({0, obj->value(x0), obj->gradient(x0).norm(), std::nullopt, std::nullopt, x0});

  if (o.checkpoint) {
    const Checkpoint ck = load_checkpoint(*o.checkpoint);
    LsrOneConfig cfg;
    if (!ck.training_config.empty()) {
      const RunConfig trained = parse_config(json::parse(ck.training_config));
      cfg = trained.lsr1;
      cfg.buffer = trained.test_objectives.buffer;
    }
    cfg.features = ck.model.config.features;
    cfg.gamma1 = ck.model.config.gamma1;
    cfg.gamma2 = ck.model.config.gamma2;
    if (o.buffer) cfg.buffer = *o.buffer;
    Trajectory t = run(*obj, x0, ck.model, cfg, o.steps);
    cosine_to_newton(t, *obj, o.cosine_mode);
    for (const TrajectoryRow& r : t.rows) rows.push_back({r.k, r.value, r.grad_norm, r.secant_residual, r.cosine, r.x});
    return rows;
  }

  check_solver_name(*o.solver);
  if (is_learned_solver(*o.solver)) throw ConfigError("--solver", "learned solvers are traced with --checkpoint");
  BaselineSettings s;
  if (o.lr) s.set_lr(*o.solver, *o.lr);
  if (o.buffer && *o.solver == "lbfgs") s.lbfgs.memory = *o.buffer;
  const SolveResult r = run_baseline(*o.solver, *obj, x0, o.steps, s, true);
  for (std::size_t k = 1; k < r.iterates.size(); ++k) {
    const Vector& prev = r.iterates[k - 1];
    const Vector& x = r.iterates[k];
    const CosineSample c = newton_cosine(*obj, prev, Vector::Ones(x.size()), prev - x, CosineMode::displacement);
    rows.push_back({static_cast<int>(k), r.values[k], obj->gradient(x).norm(), std::nullopt,
                    c.skipped ? std::nullopt : std::optional<double>(c.value), x});
  }
  if (r.diverged) std::cerr << "warning: " << *o.solver << " diverged after " << r.iterations << " iterations\n";
  return rows;
}

inline json trace_meta(const TraceOptions& o) {
  json j;
  j["command"] = "trace";
  j["artifact_version"] = kArtifactVersion;
  j["library_version"] = std::string(kLibraryVersion);
  j["checkpoint"] = o.checkpoint ? json(o.checkpoint->string()) : json(nullptr);
  if (o.checkpoint) j["checkpoint_fingerprint"] = load_checkpoint(*o.checkpoint).fingerprint;
  j["solver"] = o.solver ? json(*o.solver) : json("lsr1");
  j["objective"] = o.objective;
  j["dim"] = o.dim;
  j["cond"] = o.cond ? json(*o.cond) : json(nullptr);
  j["max_cond"] = o.max_cond ? json(*o.max_cond) : json(nullptr);
  j["x0"] = o.x0 ? json(*o.x0) : json(nullptr);
  j["seeds"] = {{"problem", o.seed}};
  j["steps"] = o.steps;
  j["buffer"] = o.buffer ? json(*o.buffer) : json(nullptr);
  j["lr"] = o.lr ? json(*o.lr) : json(nullptr);
  j["cosine_mode"] = std::string(to_string(o.cosine_mode));
  return j;
}

inline int cmd_trace(const TraceOptions& o, std::ostream& out = std::cout) {
  const std::vector<TraceRow> rows = trace_rows(o);
  std::ostringstream csv;
  write_trace_csv(csv, rows);
  std::filesystem::path path;
  if (o.output) {
    path = *o.output;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  } else {
    RunConfig root_cfg;
    if (o.output_root) root_cfg.output_dir = *o.output_root;
    const auto dir = make_run_dir(root_cfg, "trace", o.run_name);
    path = dir / "trace.csv";
    write_text(dir / "run_meta.json", trace_meta(o).dump(2) + "\n");
  }
  write_text(path, csv.str());
  out << "wrote " << rows.size() - 1 << " steps to " << path.string() << " (final f " << format_double(rows.back().f)
      << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// profile

struct ProfileOutcome {
  BenchmarkResult bench;
  std::map<std::string, double> area;  // per solver, tau in [1, tau_max]
  std::filesystem::path dir;
};

namespace detail {

inline RunConfig task_training_config(const TaskSection& task, const RunConfig& top, ObjectiveKind kind) {
  if (!task.train) throw ConfigError("eval.tasks." + std::string(to_string(kind)) + ".train", "required to train a model");
  RunConfig c = *task.train;
  c.seeds.model = top.seeds.model;
  c.seeds.train = top.seeds.train;
  c.seeds.validation = top.seeds.validation;
  return c;
}

}  // namespace detail

inline ProfileOutcome run_profile(const RunConfig& cfg, const std::filesystem::path& dir, int jobs,
                                  std::ostream* progress) {
  namespace fs = std::filesystem;
  const std::vector<SuiteProblem> suite = make_suite(cfg.eval.families, cfg.eval.dims, cfg.seeds.suite);
  std::set<ObjectiveKind> kinds;
  for (const SuiteProblem& p : suite) kinds.insert(p.family.kind);

  BenchmarkSetup setup;
  setup.solvers = cfg.eval.solvers;
  setup.tau_max = cfg.eval.tau_max;
  setup.cosine_mode = cfg.eval.cosine_mode;
  setup.jobs = jobs;
  json meta = run_meta("profile", cfg);
  json models = json::object();

  for (ObjectiveKind kind : kinds) {
    const std::string kname(to_string(kind));
    const auto task_it = cfg.eval.tasks.find(kind);
    const TaskSection* task = task_it == cfg.eval.tasks.end() ? nullptr : &task_it->second;
    const int train_unroll = task && task->train ? task->train->metatrain.unroll : cfg.metatrain.unroll;
    setup.steps[kind] = task && task->steps ? *task->steps : 4 * train_unroll;

    for (const std::string& solver : cfg.eval.solvers) {
      if (!is_learned_solver(solver)) continue;
      if (!task) throw ConfigError("eval.tasks." + kname, "required for learned solver " + solver);
      const bool projection = solver == "lsr1";
      const auto& ckpt = projection ? task->lsr1_checkpoint : task->noproj_checkpoint;
      LearnedSolver learned;
      json info;
      if (ckpt) {
        Checkpoint ck = load_checkpoint(*ckpt);
        learned.model = std::move(ck.model);
        learned.lsr1 = task->train ? task->train->lsr1 : LsrOneConfig{};
        info = {{"checkpoint", *ckpt}, {"fingerprint", ck.fingerprint}};
      } else {
        RunConfig tc = detail::task_training_config(*task, cfg, kind);
        if (!projection) tc.metatrain.secant_weight = 0.0;
        const fs::path tdir = dir / "models" / (kname + "-" + solver);
        if (progress) *progress << "training " << solver << " on " << kname << ": " << describe_training(tc) << '\n';
        learned.lsr1 = tc.lsr1;
        info = {{"directory", fs::relative(tdir, dir).string()}};
        try {
          const TrainOutcome t = train_and_test(tc, tdir, jobs, nullptr);
          learned.model = t.result.best_model;
          info["best_iteration"] = t.result.best_iteration;
          info["best_val_loss"] = t.result.best_val_loss;
        } catch (const MetaTrainingError& e) {
          // Keep the best validated model written before the abort.
          learned.model = load_checkpoint(tdir / "best.ckpt").model;
          info["training_aborted"] = e.what();
          if (progress) *progress << "training aborted, using best validated model: " << e.what() << '\n';
        }
      }
      learned.lsr1.features = learned.model.config.features;
      learned.lsr1.gamma1 = learned.model.config.gamma1;
      learned.lsr1.gamma2 = learned.model.config.gamma2;
      learned.lsr1.buffer = task->test_buffer;
      models[kname][solver] = info;
      setup.learned[{solver, kind}] = std::move(learned);
    }
  }

  // Baseline rates: fixed when configured, otherwise tuned per (solver, family)
  // on held-out start points of the same family.
  json rates = json::object();
  std::vector<std::string> family_names;
  for (const std::string& f : cfg.eval.families)
    if (std::find(family_names.begin(), family_names.end(), f) == family_names.end()) family_names.push_back(f);
  for (std::size_t fi = 0; fi < family_names.size(); ++fi) {
    const Family family = parse_family(family_names[fi]);
    BaselineSettings settings = cfg.baselines.settings;
    for (const std::string& solver : cfg.eval.solvers) {
      if (is_learned_solver(solver)) continue;
      const bool quadratic = family.kind == ObjectiveKind::quadratic;
      const auto lr_it = cfg.baselines.lr.find(solver);
      const std::optional<double> fixed = lr_it == cfg.baselines.lr.end() ? std::nullopt : lr_it->second;
      if (fixed) {
        settings.set_lr(solver, *fixed);
        rates[family.name][solver] = {{"lr", *fixed}, {"tuned", false}};
      } else if (uses_learning_rate(solver, settings, quadratic)) {
        ObjectiveBatch tuning;
        tuning.seed = derive_seed(cfg.seeds.tuning, fi);
        std::uint64_t index = 0;
        for (Eigen::Index n : cfg.eval.dims) {
          const ObjectiveBatch b = make_batch(family_spec(family, n, -2.0, 2.0),
                                              static_cast<std::size_t>(cfg.baselines.tuning_problems),
                                              derive_seed(tuning.seed, index++));
          tuning.objectives.insert(tuning.objectives.end(), b.objectives.begin(), b.objectives.end());
          tuning.initial_points.insert(tuning.initial_points.end(), b.initial_points.begin(), b.initial_points.end());
        }
        const TuningResult best =
            tune_learning_rate(solver, tuning, setup.steps.at(family.kind), settings, cfg.baselines.lr_grid);
        settings.set_lr(solver, best.lr);
        rates[family.name][solver] = {{"lr", best.lr}, {"tuned", true}, {"tuning_score", best.score}};
      } else {
        rates[family.name][solver] = {{"lr", nullptr}, {"tuned", false}, {"rule", "exact"}};
      }
    }
    setup.baselines[family.name] = settings;
  }

  if (progress) *progress << "running " << suite.size() << " problems x " << setup.solvers.size() << " solvers\n";
  ProfileOutcome out;
  out.dir = dir;
  out.bench = run_benchmark(suite, setup);

  std::ostringstream profiles, measures, cosine, summary;
  write_profiles_csv(profiles, out.bench.table, cfg.eval.tau_max);
  write_measures_csv(measures, out.bench.table, out.bench.final_values);
  write_cosine_csv(cosine, out.bench.cosine);
  CsvWriter sum(summary);
  sum.header({"solver", "rho_at_1", "area"});
  for (std::size_t s = 0; s < setup.solvers.size(); ++s) {
    const auto si = static_cast<Eigen::Index>(s);
    const double area = profile_area(out.bench.table.ratios, si, cfg.eval.tau_max);
    out.area[setup.solvers[s]] = area;
    sum.cell(setup.solvers[s]).cell(profile_rho(out.bench.table.ratios, si, 1.0)).cell(area);
    sum.end_row();
  }
  write_text(dir / "profiles.csv", profiles.str());
  write_text(dir / "measures.csv", measures.str());
  write_text(dir / "cosine_trace.csv", cosine.str());
  write_text(dir / "summary.csv", summary.str());

  json steps = json::object();
  for (const auto& [kind, k] : setup.steps) steps[std::string(to_string(kind))] = k;
  meta["step_budget"] = steps;
  meta["baseline_rates"] = rates;
  meta["models"] = models;
  meta["problems"] = out.bench.table.problems;
  write_text(dir / "run_meta.json", meta.dump(2) + "\n");
  return out;
}

inline int cmd_profile(const RunOptions& opts, std::optional<double> tau_max = {}, std::ostream& out = std::cout) {
  RunConfig cfg = load_run_config(opts.config);
  if (tau_max) {
    if (!(*tau_max >= 1.0)) throw ConfigError("--tau-max", "must be >= 1");
    cfg.eval.tau_max = *tau_max;
  }
  const auto dir = make_run_dir(cfg, "profile", opts.run_name);
  out << "run directory: " << dir.string() << '\n';
  const ProfileOutcome res = run_profile(cfg, dir, opts.jobs, opts.quiet ? nullptr : &out);
  for (const auto& [solver, area] : res.area) {
    out << "area under rho on [1, " << format_double(cfg.eval.tau_max) << "] " << solver << ": " << format_double(area)
        << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// inspect

inline int cmd_inspect(const std::filesystem::path& path, std::ostream& out = std::cout) {
  const Checkpoint ck = load_checkpoint(path);
  out << "format version: " << ck.version << '\n';
  out << "parameters: " << count_parameters(ck.model) << '\n';
  out << "fingerprint: " << ck.fingerprint << '\n';
  out << "model: " << model_config_to_json(ck.model.config).dump() << '\n';
  out << "training state: " << (ck.state ? "iteration " + std::to_string(ck.state->iteration) : std::string("none"))
      << '\n';
  out << "layers:\n";
  for (const auto& entry : ck.manifest) {
    out << "  " << entry.name << ' ' << entry.rows << 'x' << entry.cols << '\n';
  }
  return kExitOk;
}

}  // namespace lsr1
