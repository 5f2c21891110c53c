// Run configuration: a JSON document with sections {model, lsr1, metatrain,
// objectives, eval, baselines, seeds, output_dir}. Every field has a default;
// unknown keys are rejected. Presets are JSON files of the same shape.
#pragma once

#include "lsr1/baselines.hpp"
#include "lsr1/eval.hpp"
#include "lsr1/metatrain.hpp"
#include "lsr1/model.hpp"
#include "lsr1/objectives.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef LSR1_PRESET_DIR
#define LSR1_PRESET_DIR "presets"
#endif

namespace lsr1 {

using json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(field) {}
  [[nodiscard]] const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct ObjectiveSection {
  ProblemSpec spec;
  int size = 32;   // validation and test only
  int steps = 20;  // test only
  int buffer = 8;  // test only: L at inference
};

struct Seeds {
  std::uint64_t model = 0;
  std::uint64_t train = 1;
  std::uint64_t validation = 2;
  std::uint64_t test = 3;
  std::uint64_t suite = 4;
  std::uint64_t tuning = 5;
};

struct RunConfig;

/// How the profile command obtains the learned solvers for one training task.
struct TaskSection {
  std::shared_ptr<const RunConfig> train;  // training recipe
  std::string train_source;                // preset name, or empty for an inline document
  int test_buffer = 64;
  std::optional<int> steps;  // default 4 * unroll of the training recipe
  std::optional<std::string> lsr1_checkpoint;
  std::optional<std::string> noproj_checkpoint;
};

struct EvalSection {
  std::vector<std::string> families = standard_families();
  std::vector<Eigen::Index> dims = {50, 100, 250, 500, 1000};
  std::vector<std::string> solvers = {"lsr1", "lsr1-noproj", "lbfgs", "adam", "adahessian"};
  double tau_max = 20.0;
  CosineMode cosine_mode = CosineMode::displacement;
  std::map<ObjectiveKind, TaskSection> tasks;
};

struct BaselineSection {
  BaselineSettings settings;
  // Unset rates are tuned per (solver, family) before a profile run.
  std::map<std::string, std::optional<double>> lr = {
      {"lbfgs", std::nullopt}, {"adam", std::nullopt}, {"sr1", std::nullopt}, {"adahessian", std::nullopt}};
  std::vector<double> lr_grid = default_lr_grid();
  int tuning_problems = 4;
};

struct RunConfig {
  ModelConfig model;
  LsrOneConfig lsr1;
  MetaConfig metatrain;
  ObjectiveSection train_objectives;
  ObjectiveSection validation_objectives;
  ObjectiveSection test_objectives;
  EvalSection eval;
  BaselineSection baselines;
  Seeds seeds;
  std::string output_dir = "runs";

  /// MetaConfig with problems, seeds and the lsr1 section folded in.
  [[nodiscard]] MetaConfig meta() const {
    MetaConfig m = metatrain;
    m.train_problems = train_objectives.spec;
    m.validation_problems = validation_objectives.spec;
    m.validation_size = validation_objectives.size;
    m.train_seed = seeds.train;
    m.validation_seed = seeds.validation;
    m.lsr1 = lsr1;
    return m;
  }

  [[nodiscard]] ModelConfig model_config() const {
    ModelConfig m = model;
    m.gamma1 = lsr1.gamma1;
    m.gamma2 = lsr1.gamma2;
    m.seed = seeds.model;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Defaults document

inline json problem_json(const ProblemSpec& s) {
  json j;
  j["kind"] = std::string(to_string(s.kind));
  j["dim"] = s.dim;
  j["max_cond"] = s.max_cond ? json(*s.max_cond) : json(nullptr);
  j["diagonal_cond"] = s.diagonal_cond ? json(*s.diagonal_cond) : json(nullptr);
  j["init_low"] = s.init_low;
  j["init_high"] = s.init_high;
  return j;
}

inline json to_json(const RunConfig& c);

inline json task_json(const TaskSection& t) {
  json j;
  j["train"] = t.train ? to_json(*t.train) : json(nullptr);
  j["test_buffer"] = t.test_buffer;
  j["steps"] = t.steps ? json(*t.steps) : json(nullptr);
  j["lsr1_checkpoint"] = t.lsr1_checkpoint ? json(*t.lsr1_checkpoint) : json(nullptr);
  j["noproj_checkpoint"] = t.noproj_checkpoint ? json(*t.noproj_checkpoint) : json(nullptr);
  return j;
}

/// Canonical, fully resolved document; keys are sorted so dumps are stable.
inline json to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"hidden", c.model.hidden},
                {"features", c.model.features.names()},
                {"normalize", c.model.normalize},
                {"norm_eps", c.model.norm_eps},
                {"dropout", c.model.dropout}};
  j["lsr1"] = {{"buffer", c.lsr1.buffer},
               {"gamma1", c.lsr1.gamma1},
               {"gamma2", c.lsr1.gamma2},
               {"include_identity", c.lsr1.include_identity}};
  const MetaConfig& m = c.metatrain;
  j["metatrain"] = {{"unroll", m.unroll},
                    {"batch", m.batch},
                    {"iterations", m.iterations},
                    {"lr", m.lr},
                    {"beta1", m.beta1},
                    {"beta2", m.beta2},
                    {"weight_decay", m.weight_decay},
                    {"eps", m.eps},
                    {"secant_weight", m.secant_weight},
                    {"detach_secant", m.detach_secant},
                    {"validate_every", m.validate_every},
                    {"checkpoint_every", m.checkpoint_every}};
  json train = problem_json(c.train_objectives.spec);
  json validation = problem_json(c.validation_objectives.spec);
  validation["size"] = c.validation_objectives.size;
  json test = problem_json(c.test_objectives.spec);
  test["size"] = c.test_objectives.size;
  test["steps"] = c.test_objectives.steps;
  test["buffer"] = c.test_objectives.buffer;
  j["objectives"] = {{"train", train}, {"validation", validation}, {"test", test}};
  json tasks = json::object();
  for (const auto& [kind, t] : c.eval.tasks) tasks[std::string(to_string(kind))] = task_json(t);
  j["eval"] = {{"families", c.eval.families},
               {"dims", c.eval.dims},
               {"solvers", c.eval.solvers},
               {"tau_max", c.eval.tau_max},
               {"cosine_mode", std::string(to_string(c.eval.cosine_mode))},
               {"tasks", tasks}};
  const BaselineSettings& b = c.baselines.settings;
  auto rate = [&](const std::string& s) {
    const auto it = c.baselines.lr.find(s);
    return it != c.baselines.lr.end() && it->second ? json(*it->second) : json(nullptr);
  };
  j["baselines"] = {
      {"lbfgs", {{"memory", b.lbfgs.memory}, {"rule", std::string(to_string(b.lbfgs.rule))}, {"lr", rate("lbfgs")},
                 {"curvature_eps", b.lbfgs.curvature_eps}}},
      {"adam", {{"lr", rate("adam")}, {"beta1", b.adam.beta1}, {"beta2", b.adam.beta2}, {"eps", b.adam.eps}}},
      {"sr1", {{"rule", std::string(to_string(b.sr1.rule))}, {"lr", rate("sr1")}, {"skip", b.sr1.skip}}},
      {"adahessian",
       {{"lr", rate("adahessian")},
        {"beta1", b.adahessian.beta1},
        {"beta2", b.adahessian.beta2},
        {"eps", b.adahessian.eps},
        {"hessian_power", b.adahessian.hessian_power},
        {"mode", b.adahessian.mode == HessianDiagonal::analytic ? "analytic" : "hutchinson"},
        {"probes", b.adahessian.probes}}},
      {"lr_grid", c.baselines.lr_grid},
      {"tuning_problems", c.baselines.tuning_problems}};
  j["seeds"] = {{"model", c.seeds.model}, {"train", c.seeds.train},   {"validation", c.seeds.validation},
                {"test", c.seeds.test},   {"suite", c.seeds.suite},   {"tuning", c.seeds.tuning}};
  j["output_dir"] = c.output_dir;
  return j;
}

/// Defaults: the quadratic recipe (N=2 training, batch 128, K=16, L=8, lambda_sec=100, lr 1e-4, 10 000 iterations).
inline RunConfig default_config() {
  RunConfig c;
  c.metatrain.checkpoint_every = 1000;
  c.train_objectives.spec = {ObjectiveKind::quadratic, 2, std::nullopt, std::nullopt, -2.0, 2.0};
  c.validation_objectives.spec = {ObjectiveKind::quadratic, 2, std::nullopt, 1000.0, -2.0, 2.0};
  c.validation_objectives.size = 32;
  c.test_objectives.spec = {ObjectiveKind::quadratic, 10, std::nullopt, 1000.0, -2.0, 2.0};
  c.test_objectives.size = 32;
  c.test_objectives.steps = 20;
  c.test_objectives.buffer = 8;
  return c;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

// Reads one object, remembering which keys were consumed so leftovers can be
// reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  [[nodiscard]] std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    known_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    out = convert<T>(*v, field(key));
  }

  template <class T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    const json* v = find(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
    } else {
      out = convert<T>(*v, field(key));
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) {
        std::string expected;
        for (const std::string& k : known_) expected += (expected.empty() ? "" : ", ") + k;
        throw ConfigError(field(it.key()), "unknown key (expected one of: " + expected + ")");
      }
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
      if (std::is_unsigned_v<T> && v.get<long long>() < 0 && !v.is_number_unsigned()) {
        throw ConfigError(field, "expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field, "expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(field, "expected a list");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], field + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

template <class F>
void with_field(const std::string& field, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

inline void read_problem(Reader& r, ObjectiveSection& s, bool sized, bool test) {
  std::string kind(to_string(s.spec.kind));
  r.get("kind", kind);
  with_field(r.field("kind"), [&] { s.spec.kind = parse_objective_kind(kind); });
  r.get("dim", s.spec.dim);
  r.get_optional("max_cond", s.spec.max_cond);
  r.get_optional("diagonal_cond", s.spec.diagonal_cond);
  r.get("init_low", s.spec.init_low);
  r.get("init_high", s.spec.init_high);
  if (sized) r.get("size", s.size);
  if (test) {
    r.get("steps", s.steps);
    r.get("buffer", s.buffer);
  }
  r.finish();
  if (s.spec.dim < 1) throw ConfigError(r.field("dim"), "must be >= 1");
  if (!(s.spec.init_low < s.spec.init_high)) throw ConfigError(r.field("init_low"), "must be below init_high");
  if (s.spec.max_cond && !(*s.spec.max_cond >= 1.0)) throw ConfigError(r.field("max_cond"), "must be >= 1");
  if (s.spec.diagonal_cond && !(*s.spec.diagonal_cond >= 1.0)) {
    throw ConfigError(r.field("diagonal_cond"), "must be >= 1");
  }
  if (sized && s.size < 1) throw ConfigError(r.field("size"), "must be >= 1");
  if (test && s.steps < 1) throw ConfigError(r.field("steps"), "must be >= 1");
  if (test && s.buffer < 1) throw ConfigError(r.field("buffer"), "must be >= 1");
}

}  // namespace detail

inline std::filesystem::path preset_dir() {
  if (const char* env = std::getenv("LSR1_PRESET_DIR"); env && *env) return env;
  return LSR1_PRESET_DIR;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

inline std::vector<std::string> list_presets() {
  std::vector<std::string> names;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(preset_dir(), ec)) {
    if (entry.path().extension() == ".json") names.push_back(entry.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

inline json load_preset(const std::string& name) {
  const auto path = preset_dir() / (name + ".json");
  if (!std::filesystem::exists(path)) {
    std::string known;
    for (const std::string& n : list_presets()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("preset", "unknown preset '" + name + "' (available: " + known + ")");
  }
  return read_json_file(path);
}

/// Recursively overlays `patch` onto `base` (objects merge, everything else replaces).
inline void merge_into(json& base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object()) {
      merge_into(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set", "expected section.key=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError(path, "cannot set a key inside a non-object");
    if (!node->contains(parts[i]) || (*node)[parts[i]].is_null()) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  if (!node->is_object()) throw ConfigError(path, "cannot set a key inside a non-object");
  (*node)[parts.back()] = value;
}

inline RunConfig parse_config(const json& doc, const std::string& path = "");

namespace detail {

inline void read_task(Reader& r, TaskSection& t) {
  if (const json* train = r.find("train")) {
    if (train->is_string()) {
      t.train_source = train->get<std::string>();
      with_field(r.field("train"), [&] { t.train = std::make_shared<RunConfig>(parse_config(load_preset(t.train_source))); });
    } else if (train->is_object()) {
      t.train = std::make_shared<RunConfig>(parse_config(*train, r.field("train")));
    } else if (!train->is_null()) {
      throw ConfigError(r.field("train"), "expected a preset name or a config object");
    }
  }
  r.get("test_buffer", t.test_buffer);
  r.get_optional("steps", t.steps);
  r.get_optional("lsr1_checkpoint", t.lsr1_checkpoint);
  r.get_optional("noproj_checkpoint", t.noproj_checkpoint);
  r.finish();
  if (t.test_buffer < 1) throw ConfigError(r.field("test_buffer"), "must be >= 1");
  if (t.steps && *t.steps < 1) throw ConfigError(r.field("steps"), "must be >= 1");
}

}  // namespace detail

/// Parses a document over the defaults. Field-level errors name the offending key.
inline RunConfig parse_config(const json& doc, const std::string& path) {
  using detail::Reader;
  using detail::with_field;
  RunConfig c = default_config();
  Reader root(doc, path);

  if (const json* j = root.find("model")) {
    Reader r(*j, root.field("model"));
    r.get("hidden", c.model.hidden);
    std::vector<std::string> features = c.model.features.names();
    r.get("features", features);
    with_field(r.field("features"), [&] { c.model.features = FeatureMask::from_names(features); });
    r.get("normalize", c.model.normalize);
    r.get("norm_eps", c.model.norm_eps);
    r.get("dropout", c.model.dropout);
    r.finish();
    if (c.model.hidden < 1) throw ConfigError(r.field("hidden"), "must be >= 1");
    if (!(c.model.dropout >= 0.0 && c.model.dropout < 1.0)) throw ConfigError(r.field("dropout"), "must be in [0, 1)");
    if (!(c.model.norm_eps > 0.0)) throw ConfigError(r.field("norm_eps"), "must be > 0");
  }
  if (const json* j = root.find("lsr1")) {
    Reader r(*j, root.field("lsr1"));
    r.get("buffer", c.lsr1.buffer);
    r.get("gamma1", c.lsr1.gamma1);
    r.get("gamma2", c.lsr1.gamma2);
    r.get("include_identity", c.lsr1.include_identity);
    r.finish();
    with_field(r.field("buffer"), [&] { c.lsr1.validate(); });
  }
  c.lsr1.features = c.model.features;

  if (const json* j = root.find("metatrain")) {
    Reader r(*j, root.field("metatrain"));
    MetaConfig& m = c.metatrain;
    r.get("unroll", m.unroll);
    r.get("batch", m.batch);
    r.get("iterations", m.iterations);
    r.get("lr", m.lr);
    r.get("beta1", m.beta1);
    r.get("beta2", m.beta2);
    r.get("weight_decay", m.weight_decay);
    r.get("eps", m.eps);
    r.get("secant_weight", m.secant_weight);
    r.get("detach_secant", m.detach_secant);
    r.get("validate_every", m.validate_every);
    r.get("checkpoint_every", m.checkpoint_every);
    r.finish();
  }
  if (const json* j = root.find("objectives")) {
    Reader r(*j, root.field("objectives"));
    if (const json* t = r.find("train")) {
      Reader s(*t, r.field("train"));
      detail::read_problem(s, c.train_objectives, false, false);
    }
    if (const json* t = r.find("validation")) {
      Reader s(*t, r.field("validation"));
      detail::read_problem(s, c.validation_objectives, true, false);
    }
    if (const json* t = r.find("test")) {
      Reader s(*t, r.field("test"));
      detail::read_problem(s, c.test_objectives, true, true);
    }
    r.finish();
  }
  if (const json* j = root.find("eval")) {
    Reader r(*j, root.field("eval"));
    r.get("families", c.eval.families);
    for (const std::string& f : c.eval.families) with_field(r.field("families"), [&] { parse_family(f); });
    r.get("dims", c.eval.dims);
    for (Eigen::Index n : c.eval.dims)
      if (n < 1) throw ConfigError(r.field("dims"), "dimensions must be >= 1");
    r.get("solvers", c.eval.solvers);
    if (c.eval.solvers.empty()) throw ConfigError(r.field("solvers"), "empty solver set");
    for (const std::string& s : c.eval.solvers) with_field(r.field("solvers"), [&] { check_solver_name(s); });
    r.get("tau_max", c.eval.tau_max);
    if (!(c.eval.tau_max >= 1.0)) throw ConfigError(r.field("tau_max"), "must be >= 1");
    std::string mode(to_string(c.eval.cosine_mode));
    r.get("cosine_mode", mode);
    with_field(r.field("cosine_mode"), [&] { c.eval.cosine_mode = parse_cosine_mode(mode); });
    if (const json* tasks = r.find("tasks")) {
      Reader tr(*tasks, r.field("tasks"));
      for (const char* name : {"quadratic", "rosenbrock", "rastrigin"}) {
        if (const json* t = tr.find(name)) {
          Reader one(*t, tr.field(name));
          TaskSection task;
          detail::read_task(one, task);
          c.eval.tasks[parse_objective_kind(name)] = std::move(task);
        }
      }
      tr.finish();
    }
    r.finish();
  }
  if (const json* j = root.find("baselines")) {
    Reader r(*j, root.field("baselines"));
    BaselineSettings& b = c.baselines.settings;
    auto rule = [&](Reader& s, StepRule& out) {
      std::string text(to_string(out));
      s.get("rule", text);
      with_field(s.field("rule"), [&] { out = parse_step_rule(text); });
    };
    if (const json* t = r.find("lbfgs")) {
      Reader s(*t, r.field("lbfgs"));
      s.get("memory", b.lbfgs.memory);
      rule(s, b.lbfgs.rule);
      s.get_optional("lr", c.baselines.lr["lbfgs"]);
      s.get("curvature_eps", b.lbfgs.curvature_eps);
      s.finish();
      if (b.lbfgs.memory < 1) throw ConfigError(s.field("memory"), "must be >= 1");
    }
    if (const json* t = r.find("adam")) {
      Reader s(*t, r.field("adam"));
      s.get_optional("lr", c.baselines.lr["adam"]);
      s.get("beta1", b.adam.beta1);
      s.get("beta2", b.adam.beta2);
      s.get("eps", b.adam.eps);
      s.finish();
    }
    if (const json* t = r.find("sr1")) {
      Reader s(*t, r.field("sr1"));
      rule(s, b.sr1.rule);
      s.get_optional("lr", c.baselines.lr["sr1"]);
      s.get("skip", b.sr1.skip);
      s.finish();
    }
    if (const json* t = r.find("adahessian")) {
      Reader s(*t, r.field("adahessian"));
      s.get_optional("lr", c.baselines.lr["adahessian"]);
      s.get("beta1", b.adahessian.beta1);
      s.get("beta2", b.adahessian.beta2);
      s.get("eps", b.adahessian.eps);
      s.get("hessian_power", b.adahessian.hessian_power);
      std::string mode = b.adahessian.mode == HessianDiagonal::analytic ? "analytic" : "hutchinson";
      s.get("mode", mode);
      if (mode == "analytic") {
        b.adahessian.mode = HessianDiagonal::analytic;
      } else if (mode == "hutchinson") {
        b.adahessian.mode = HessianDiagonal::hutchinson;
      } else {
        throw ConfigError(s.field("mode"), "expected analytic or hutchinson");
      }
      s.get("probes", b.adahessian.probes);
      s.finish();
    }
    r.get("lr_grid", c.baselines.lr_grid);
    if (c.baselines.lr_grid.empty()) throw ConfigError(r.field("lr_grid"), "must not be empty");
    for (double lr : c.baselines.lr_grid)
      if (!(lr > 0.0)) throw ConfigError(r.field("lr_grid"), "rates must be > 0");
    r.get("tuning_problems", c.baselines.tuning_problems);
    if (c.baselines.tuning_problems < 1) throw ConfigError(r.field("tuning_problems"), "must be >= 1");
    r.finish();
    for (const auto& [solver, lr] : c.baselines.lr) {
      if (lr && !(*lr > 0.0)) throw ConfigError("baselines." + solver + ".lr", "must be > 0");
      if (lr) b.set_lr(solver, *lr);
    }
  }
  if (const json* j = root.find("seeds")) {
    Reader r(*j, root.field("seeds"));
    r.get("model", c.seeds.model);
    r.get("train", c.seeds.train);
    r.get("validation", c.seeds.validation);
    r.get("test", c.seeds.test);
    r.get("suite", c.seeds.suite);
    r.get("tuning", c.seeds.tuning);
    r.finish();
  }
  root.get("output_dir", c.output_dir);
  root.finish();

  with_field(path.empty() ? "metatrain" : path + ".metatrain", [&] { c.meta().validate(); });
  return c;
}

/// Builds the document from an optional preset, an optional file and --set overrides, in that order.
inline json compose_config(const std::optional<std::string>& preset, const std::optional<std::filesystem::path>& file,
                           const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (preset) merge_into(doc, load_preset(*preset));
  if (file) merge_into(doc, read_json_file(*file));
  for (const std::string& o : overrides) apply_override(doc, o);
  return doc;
}

}  // namespace lsr1
