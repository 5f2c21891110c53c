// Evaluation: cosine similarity to the Newton direction, Dolan-More style
// performance profiles, and the benchmark runner that produces them.
#pragma once

#include "lsr1/baselines.hpp"
#include "lsr1/csv.hpp"
#include "lsr1/lsr1.hpp"
#include "lsr1/model.hpp"
#include "lsr1/objectives.hpp"
#include "lsr1/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsr1 {

// ---------------------------------------------------------------------------
// Cosine to the Newton direction

enum class CosineMode { displacement, raw };

inline CosineMode parse_cosine_mode(std::string_view s) {
  if (s == "displacement") return CosineMode::displacement;
  if (s == "raw") return CosineMode::raw;
  throw std::invalid_argument("unknown cosine mode '" + std::string(s) + "' (expected displacement or raw)");
}

inline std::string_view to_string(CosineMode m) { return m == CosineMode::raw ? "raw" : "displacement"; }

struct CosineSample {
  double value = 0.0;
  bool skipped = false;  // Newton direction undefined at x_{k-1}
  bool zero = false;     // step direction was exactly zero; value recorded as 0
};

inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// cos(step, d_NM(x_prev)) with step = -alpha .* d (displacement) or -d (raw).
inline CosineSample newton_cosine(const Objective& obj, const Vector& x_prev, const Vector& alpha, const Vector& d,
                                  CosineMode mode) {
  CosineSample s;
  const Vector step = mode == CosineMode::raw ? Vector(-d) : Vector(-(alpha.array() * d.array()).matrix());
  Vector newton;
  try {
    newton = newton_direction(obj, x_prev);
  } catch (const NewtonError&) {
    s.skipped = true;
    return s;
  }
  if (step.norm() == 0.0) {
    s.zero = true;
    return s;
  }
  s.value = cosine(step, newton);
  return s;
}

/// Fills row.cosine for every step of a trajectory; skipped steps stay empty.
inline std::vector<CosineSample> cosine_to_newton(Trajectory& traj, const Objective& obj,
                                                  CosineMode mode = CosineMode::displacement) {
  std::vector<CosineSample> out;
  out.reserve(traj.rows.size());
  for (TrajectoryRow& row : traj.rows) {
    const CosineSample s = newton_cosine(obj, row.x_prev, row.alpha, row.d, mode);
    if (!s.skipped) row.cosine = s.value;
    out.push_back(s);
  }
  return out;
}

/// Per-step mean cosine over a set of trajectories.
struct CosineTrace {
  std::vector<double> mean;  // index k-1
  std::vector<int> count;
  std::vector<int> skipped;
  std::vector<int> zero;

  void add(const std::vector<CosineSample>& samples) {
    if (samples.size() > mean.size()) {
      mean.resize(samples.size(), 0.0);
      count.resize(samples.size(), 0);
      skipped.resize(samples.size(), 0);
      zero.resize(samples.size(), 0);
    }
    for (std::size_t k = 0; k < samples.size(); ++k) {
      if (samples[k].skipped) {
        ++skipped[k];
        continue;
      }
      if (samples[k].zero) ++zero[k];
      // Running sum; divided in finish().
      mean[k] += samples[k].value;
      ++count[k];
    }
  }

  void finish() {
    for (std::size_t k = 0; k < mean.size(); ++k)
      mean[k] = count[k] > 0 ? mean[k] / count[k] : std::numeric_limits<double>::quiet_NaN();
  }
};

// ---------------------------------------------------------------------------
// Performance profiles

inline constexpr double kProfileMinGuard = 1e-15;

struct ProfileTable {
  std::vector<std::string> problems;
  std::vector<std::string> solvers;
  Matrix measures;  // problems x solvers, in [0, 1]
  Matrix ratios;    // problems x solvers, >= 1
  Matrix distances;  // ||x_hat - x*||, +inf when diverged
  std::vector<double> worst_distance;
};

/// r_{p,s} = m_{p,s} / min_s m_{p,s}. The minimum is floored at 1e-15 so a
/// solver landing exactly on x* keeps r = 1 without 0/0.
inline Matrix profile_ratios(const Matrix& measures) {
  Matrix r(measures.rows(), measures.cols());
  for (Eigen::Index p = 0; p < measures.rows(); ++p) {
    const double best = std::max(measures.row(p).minCoeff(), kProfileMinGuard);
    for (Eigen::Index s = 0; s < measures.cols(); ++s) r(p, s) = std::max(1.0, measures(p, s) / best);
  }
  return r;
}

/// Builds the table from final iterates. Non-finite iterates count as diverged
/// and get the worst measure 1; x_w is the farthest finite iterate.
inline ProfileTable compute_profiles(const std::vector<std::string>& problems, const std::vector<std::string>& solvers,
                                     const std::vector<std::vector<Vector>>& finals, const std::vector<Vector>& optima) {
  if (solvers.empty()) throw std::invalid_argument("compute_profiles: empty solver set");
  if (problems.empty()) throw std::invalid_argument("compute_profiles: empty problem set");
  if (finals.size() != problems.size() || optima.size() != problems.size()) {
    throw std::invalid_argument("compute_profiles: need one row of final iterates and one optimum per problem");
  }
  const auto P = static_cast<Eigen::Index>(problems.size());
  const auto S = static_cast<Eigen::Index>(solvers.size());
  ProfileTable t;
  t.problems = problems;
  t.solvers = solvers;
  t.measures.resize(P, S);
  t.distances.resize(P, S);
  t.worst_distance.assign(problems.size(), 0.0);
  for (Eigen::Index p = 0; p < P; ++p) {
    if (finals[p].size() != solvers.size()) throw std::invalid_argument("compute_profiles: missing final iterate");
    double worst = 0.0;
    for (Eigen::Index s = 0; s < S; ++s) {
      const Vector& x = finals[p][s];
      const double dist = x.allFinite() ? (x - optima[p]).norm() : std::numeric_limits<double>::infinity();
      t.distances(p, s) = std::isfinite(dist) ? dist : std::numeric_limits<double>::infinity();
      if (std::isfinite(dist)) worst = std::max(worst, dist);
    }
    t.worst_distance[p] = worst;
    for (Eigen::Index s = 0; s < S; ++s) {
      const double dist = t.distances(p, s);
      if (!std::isfinite(dist)) {
        t.measures(p, s) = 1.0;
      } else {
        t.measures(p, s) = worst > 0.0 ? dist / worst : 0.0;
      }
    }
  }
  t.ratios = profile_ratios(t.measures);
  return t;
}

/// rho_s(tau) = |{p : r_{p,s} <= tau}| / |P|.
inline double profile_rho(const Matrix& ratios, Eigen::Index solver, double tau) {
  Eigen::Index hits = 0;
  for (Eigen::Index p = 0; p < ratios.rows(); ++p)
    if (ratios(p, solver) <= tau) ++hits;
  return static_cast<double>(hits) / static_cast<double>(ratios.rows());
}

/// Exact integral of the step function rho_s over [1, tau_max].
inline double profile_area(const Matrix& ratios, Eigen::Index solver, double tau_max) {
  if (!(tau_max >= 1.0)) throw std::invalid_argument("profile_area: tau_max must be >= 1");
  double area = 0.0;
  for (Eigen::Index p = 0; p < ratios.rows(); ++p) area += std::max(0.0, tau_max - std::max(1.0, ratios(p, solver)));
  return area / static_cast<double>(ratios.rows());
}

/// Sampling grid: `points` evenly spaced taus on [1, tau_max] plus every ratio
/// inside that range, so the sampled curve shows each jump.
inline std::vector<double> profile_grid(const Matrix& ratios, double tau_max, int points = 101) {
  if (!(tau_max >= 1.0)) throw std::invalid_argument("profile grid: tau_max must be >= 1");
  if (points < 2) throw std::invalid_argument("profile grid: need at least two points");
  std::set<double> taus;
  for (int i = 0; i < points; ++i) taus.insert(1.0 + (tau_max - 1.0) * i / (points - 1));
  for (Eigen::Index i = 0; i < ratios.size(); ++i)
    if (ratios(i) <= tau_max) taus.insert(ratios(i));
  return {taus.begin(), taus.end()};
}

inline void write_profiles_csv(std::ostream& out, const ProfileTable& t, double tau_max) {
  CsvWriter csv(out);
  std::vector<std::string> header = {"tau"};
  header.insert(header.end(), t.solvers.begin(), t.solvers.end());
  csv.header(header);
  for (double tau : profile_grid(t.ratios, tau_max)) {
    csv.cell(tau);
    for (Eigen::Index s = 0; s < t.ratios.cols(); ++s) csv.cell(profile_rho(t.ratios, s, tau));
    csv.end_row();
  }
}

inline void write_measures_csv(std::ostream& out, const ProfileTable& t, const Matrix& final_values) {
  CsvWriter csv(out);
  csv.header({"problem", "solver", "distance", "measure", "ratio", "final_f"});
  for (std::size_t p = 0; p < t.problems.size(); ++p) {
    for (std::size_t s = 0; s < t.solvers.size(); ++s) {
      const auto pi = static_cast<Eigen::Index>(p), si = static_cast<Eigen::Index>(s);
      csv.cell(t.problems[p]).cell(t.solvers[s]).cell(t.distances(pi, si)).cell(t.measures(pi, si));
      csv.cell(t.ratios(pi, si)).cell(final_values(pi, si));
      csv.end_row();
    }
  }
}

// ---------------------------------------------------------------------------
// Benchmark suites

/// One objective family of a profile suite, e.g. quadratic-cond100 or rosenbrock.
struct Family {
  std::string name;
  ObjectiveKind kind = ObjectiveKind::quadratic;
  std::optional<double> cond;
};

inline Family parse_family(std::string_view name) {
  constexpr std::string_view quad = "quadratic-cond";
  if (name.substr(0, quad.size()) == quad) {
    const std::string number(name.substr(quad.size()));
    char* end = nullptr;
    const double cond = std::strtod(number.c_str(), &end);
    if (number.empty() || *end != '\0' || !(cond >= 1.0)) {
      throw std::invalid_argument("bad quadratic family '" + std::string(name) + "' (expected quadratic-cond<C>, C >= 1)");
    }
    return {std::string(name), ObjectiveKind::quadratic, cond};
  }
  if (name == "rosenbrock") return {"rosenbrock", ObjectiveKind::rosenbrock, std::nullopt};
  if (name == "rastrigin") return {"rastrigin", ObjectiveKind::rastrigin, std::nullopt};
  throw std::invalid_argument("unknown family '" + std::string(name) +
                              "' (expected quadratic-cond<C>, rosenbrock or rastrigin)");
}

inline std::vector<std::string> standard_families() {
  return {"quadratic-cond1", "quadratic-cond100", "quadratic-cond1000", "quadratic-cond10000", "rosenbrock",
          "rastrigin"};
}

struct SuiteProblem {
  std::string id;  // family-N
  Family family;
  ObjectivePtr objective;
  Vector x0;
};

inline ProblemSpec family_spec(const Family& f, Eigen::Index dim, double init_low, double init_high) {
  ProblemSpec spec;
  spec.kind = f.kind;
  spec.dim = dim;
  spec.diagonal_cond = f.kind == ObjectiveKind::quadratic ? std::optional<double>(f.cond.value_or(1.0)) : std::nullopt;
  spec.init_low = init_low;
  spec.init_high = init_high;
  return spec;
}

/// families x dims problems; the initial point of each comes from its own substream of `seed`.
inline std::vector<SuiteProblem> make_suite(const std::vector<std::string>& families,
                                            const std::vector<Eigen::Index>& dims, std::uint64_t seed,
                                            double init_low = -2.0, double init_high = 2.0) {
  if (families.empty() || dims.empty()) throw std::invalid_argument("make_suite: need families and dimensions");
  std::vector<SuiteProblem> out;
  std::uint64_t index = 0;
  for (const std::string& name : families) {
    const Family f = parse_family(name);
    for (Eigen::Index n : dims) {
      if (n < 1) throw std::invalid_argument("make_suite: dimensions must be >= 1");
      const ObjectiveBatch one = make_batch(family_spec(f, n, init_low, init_high), 1, derive_seed(seed, index++));
      out.push_back({f.name + "-" + std::to_string(n), f, one.objectives[0], one.initial_points[0]});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark runner

/// A trained model with the inference settings used for one training task.
struct LearnedSolver {
  LsrOneModel model;
  LsrOneConfig lsr1;
};

struct BenchmarkSetup {
  std::vector<std::string> solvers;
  // Step budget per training task (quadratic / rosenbrock / rastrigin).
  std::map<ObjectiveKind, int> steps;
  // Learned solvers keyed by (solver name, training task).
  std::map<std::pair<std::string, ObjectiveKind>, LearnedSolver> learned;
  // Baseline settings per family name (rates may be tuned per family).
  std::map<std::string, BaselineSettings> baselines;
  double tau_max = 20.0;
  CosineMode cosine_mode = CosineMode::displacement;
  int jobs = 1;
};

struct BenchmarkResult {
  ProfileTable table;
  Matrix final_values;  // problems x solvers
  // Mean cosine per step and learned solver over problems with a defined Newton direction.
  std::map<std::string, CosineTrace> cosine;
};

inline BenchmarkResult run_benchmark(const std::vector<SuiteProblem>& problems, const BenchmarkSetup& setup) {
  if (setup.solvers.empty()) throw std::invalid_argument("run_benchmark: empty solver set");
  for (const std::string& s : setup.solvers) check_solver_name(s);
  if (problems.empty()) throw std::invalid_argument("run_benchmark: empty problem set");

  const std::size_t P = problems.size(), S = setup.solvers.size();
  std::vector<std::vector<Vector>> finals(P, std::vector<Vector>(S));
  std::vector<std::vector<double>> values(P, std::vector<double>(S));
  std::vector<std::vector<std::vector<CosineSample>>> samples(P, std::vector<std::vector<CosineSample>>(S));

  parallel_for(P * S, setup.jobs, [&](std::size_t cell) {
    const std::size_t p = cell / S, s = cell % S;
    const SuiteProblem& prob = problems[p];
    const std::string& solver = setup.solvers[s];
    const auto steps_it = setup.steps.find(prob.family.kind);
    if (steps_it == setup.steps.end()) throw std::invalid_argument("run_benchmark: no step budget for " + prob.id);
    const int steps = steps_it->second;
    const Eigen::Index n = prob.x0.size();
    const Vector nan_point = Vector::Constant(n, std::numeric_limits<double>::quiet_NaN());
    if (is_learned_solver(solver)) {
      const auto it = setup.learned.find({solver, prob.family.kind});
      if (it == setup.learned.end()) {
        throw std::invalid_argument("run_benchmark: no trained model for " + solver + " on " +
                                    std::string(to_string(prob.family.kind)));
      }
      try {
        Trajectory t = run(*prob.objective, prob.x0, it->second.model, it->second.lsr1, steps);
        samples[p][s] = cosine_to_newton(t, *prob.objective, setup.cosine_mode);
        finals[p][s] = t.final_point().allFinite() && std::isfinite(t.final_value()) ? t.final_point() : nan_point;
        values[p][s] = t.final_value();
      } catch (const ad::NumericError&) {
        finals[p][s] = nan_point;
        values[p][s] = std::numeric_limits<double>::quiet_NaN();
      }
    } else {
      const auto it = setup.baselines.find(prob.family.name);
      const BaselineSettings settings = it == setup.baselines.end() ? BaselineSettings{} : it->second;
      const SolveResult r = run_baseline(solver, *prob.objective, prob.x0, steps, settings);
      finals[p][s] = r.diverged ? nan_point : r.x;
      values[p][s] = r.diverged ? std::numeric_limits<double>::quiet_NaN() : r.values.back();
    }
  });

  std::vector<std::string> ids;
  std::vector<Vector> optima;
  for (const SuiteProblem& prob : problems) {
    ids.push_back(prob.id);
    optima.push_back(prob.objective->optimum());
  }
  BenchmarkResult out;
  out.table = compute_profiles(ids, setup.solvers, finals, optima);
  out.final_values.resize(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(S));
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t s = 0; s < S; ++s)
      out.final_values(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(s)) = values[p][s];
  for (std::size_t s = 0; s < S; ++s) {
    if (!is_learned_solver(setup.solvers[s])) continue;
    CosineTrace& trace = out.cosine[setup.solvers[s]];
    for (std::size_t p = 0; p < P; ++p) trace.add(samples[p][s]);
    trace.finish();
  }
  return out;
}

inline void write_cosine_csv(std::ostream& out, const std::map<std::string, CosineTrace>& traces) {
  CsvWriter csv(out);
  csv.header({"solver", "k", "mean_cosine", "count", "skipped", "zero_direction"});
  for (const auto& [name, t] : traces) {
    for (std::size_t k = 0; k < t.mean.size(); ++k) {
      csv.cell(name).cell(static_cast<int>(k + 1)).cell(t.mean[k]).cell(t.count[k]).cell(t.skipped[k]).cell(t.zero[k]);
      csv.end_row();
    }
  }
}

// ---------------------------------------------------------------------------
// Test-set evaluation of a single model (objective curve and cosine trace)

struct TestCurve {
  std::vector<double> mean_value;  // index k, k = 0..K; diverged runs excluded
  std::vector<int> finite_count;
  CosineTrace cosine;
  int diverged = 0;

  [[nodiscard]] double mean_final() const { return mean_value.back(); }
};

/// Runs `model` for `steps` iterations on every problem of `batch`. A run that
/// stops being finite counts as diverged and is left out of the means.
inline TestCurve evaluate_model(const LsrOneModel& model, const LsrOneConfig& cfg, const ObjectiveBatch& batch,
                                int steps, CosineMode mode = CosineMode::displacement, int jobs = 1) {
  std::vector<std::optional<Trajectory>> runs(batch.size());
  std::vector<std::vector<CosineSample>> samples(batch.size());
  parallel_for(batch.size(), jobs, [&](std::size_t i) {
    try {
      Trajectory t = run(*batch.objectives[i], batch.initial_points[i], model, cfg, steps);
      if (!std::isfinite(t.final_value())) return;
      samples[i] = cosine_to_newton(t, *batch.objectives[i], mode);
      runs[i] = std::move(t);
    } catch (const ad::NumericError&) {
    }
  });
  TestCurve out;
  out.mean_value.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  out.finite_count.assign(static_cast<std::size_t>(steps) + 1, 0);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!runs[i]) {
      ++out.diverged;
      continue;
    }
    out.mean_value[0] += runs[i]->initial_value;
    ++out.finite_count[0];
    for (const TrajectoryRow& row : runs[i]->rows) {
      out.mean_value[static_cast<std::size_t>(row.k)] += row.value;
      ++out.finite_count[static_cast<std::size_t>(row.k)];
    }
    out.cosine.add(samples[i]);
  }
  for (std::size_t k = 0; k < out.mean_value.size(); ++k) {
    out.mean_value[k] = out.finite_count[k] > 0 ? out.mean_value[k] / out.finite_count[k]
                                                : std::numeric_limits<double>::quiet_NaN();
  }
  out.cosine.finish();
  return out;
}

inline void write_test_curve_csv(std::ostream& out, const TestCurve& c) {
  CsvWriter csv(out);
  csv.header({"k", "mean_f", "finite_runs", "mean_cosine", "cosine_count", "cosine_skipped"});
  for (std::size_t k = 0; k < c.mean_value.size(); ++k) {
    csv.cell(static_cast<int>(k)).cell(c.mean_value[k]).cell(c.finite_count[k]);
    if (k == 0) {
      csv.cell("").cell("").cell("");
    } else {
      csv.cell(c.cosine.mean[k - 1]).cell(c.cosine.count[k - 1]).cell(c.cosine.skipped[k - 1]);
    }
    csv.end_row();
  }
}

}  // namespace lsr1
