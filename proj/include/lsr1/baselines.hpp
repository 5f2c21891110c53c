// Classical comparators: L-BFGS (two-loop recursion), Adam, dense SR1 and
// AdaHessian, plus an exact line search for quadratics and a learning-rate
// grid search. Every solver follows the same loop contract: K iterations from
// x0, recording f after each, stopping early (and flagging divergence) when
// the iterate stops being finite.
#pragma once

#include "lsr1/objectives.hpp"
#include "lsr1/random.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lsr1 {

/// alpha = g^T d / d^T H d: the exact minimizer of a quadratic along x - alpha d.
inline double exact_quadratic_linesearch(const Matrix& h, const Vector& g, const Vector& d) {
  const double curvature = d.dot(h * d);
  if (!(curvature > 0.0)) {
    throw std::domain_error("exact_quadratic_linesearch: d^T H d must be positive, got " + std::to_string(curvature));
  }
  return g.dot(d) / curvature;
}

enum class StepRule { fixed, exact_quadratic, automatic };

inline StepRule parse_step_rule(std::string_view s) {
  if (s == "fixed") return StepRule::fixed;
  if (s == "exact") return StepRule::exact_quadratic;
  if (s == "auto") return StepRule::automatic;
  throw std::invalid_argument("unknown step rule '" + std::string(s) + "' (expected fixed, exact or auto)");
}

inline std::string_view to_string(StepRule r) {
  switch (r) {
    case StepRule::fixed:
      return "fixed";
    case StepRule::exact_quadratic:
      return "exact";
    case StepRule::automatic:
      return "auto";
  }
  return "unknown";
}

namespace detail {

// Step size for x <- x - alpha * d under the configured rule.
inline double step_size(StepRule rule, double lr, const Objective& obj, const Vector& g, const Vector& d) {
  const auto* quad = dynamic_cast<const QuadraticObjective*>(&obj);
  if (rule == StepRule::exact_quadratic && !quad) {
    throw std::invalid_argument("exact line search requires a quadratic objective, got " + obj.describe());
  }
  if (rule == StepRule::fixed || !quad) return lr;
  return exact_quadratic_linesearch(quad->h(), g, d);
}

}  // namespace detail

// ---------------------------------------------------------------- L-BFGS

struct LbfgsConfig {
  int memory = 10;
  StepRule rule = StepRule::automatic;
  double lr = 1.0;
  double curvature_eps = 1e-10;
};

class LbfgsState {
 public:
  explicit LbfgsState(int memory, double curvature_eps = 1e-10) : memory_(memory), eps_(curvature_eps) {
    if (memory < 1) throw std::invalid_argument("lbfgs: memory must be >= 1");
  }

  /// Stores (s, y) unless s^T y <= eps; returns whether the pair was kept.
  bool push(const Vector& s, const Vector& y) {
    const double sy = s.dot(y);
    if (!(sy > eps_)) return false;
    if (static_cast<int>(pairs_.size()) == memory_) pairs_.pop_front();
    pairs_.push_back({s, y, 1.0 / sy});
    return true;
  }

  /// Two-loop recursion: d = -H g with H0 = (s^T y / y^T y) I from the newest pair.
  [[nodiscard]] Vector direction(const Vector& g) const {
    Vector q = g;
    std::vector<double> a(pairs_.size());
    for (std::size_t i = pairs_.size(); i-- > 0;) {
      a[i] = pairs_[i].rho * pairs_[i].s.dot(q);
      q -= a[i] * pairs_[i].y;
    }
    if (!pairs_.empty()) {
      const Pair& last = pairs_.back();
      q *= last.s.dot(last.y) / last.y.squaredNorm();
    }
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      const double b = pairs_[i].rho * pairs_[i].y.dot(q);
      q += pairs_[i].s * (a[i] - b);
    }
    return -q;
  }

  [[nodiscard]] std::size_t size() const noexcept { return pairs_.size(); }

 private:
  struct Pair {
    Vector s, y;
    double rho;
  };
  int memory_;
  double eps_;
  std::deque<Pair> pairs_;
};

// ---------------------------------------------------------------- SR1

struct Sr1Config {
  StepRule rule = StepRule::automatic;
  double lr = 1.0;
  double skip = 1e-8;
};

/// Dense inverse-Hessian approximation with B q = p after every fired update.
struct Sr1State {
  Matrix b;
  double skip = 1e-8;

  explicit Sr1State(Eigen::Index n, double skip_threshold = 1e-8)
      : b(Matrix::Identity(n, n)), skip(skip_threshold) {}
};

/// B += u u^T / (u^T q) with u = p - B q, skipped when |u^T q| <= r |u| |q|.
inline bool sr1_update(Sr1State& state, const Vector& p, const Vector& q) {
  const Vector u = p - state.b * q;
  const double denom = u.dot(q);
  if (!(std::abs(denom) > state.skip * u.norm() * q.norm())) return false;
  state.b.noalias() += (u / denom) * u.transpose();
  // Keep exact symmetry despite rounding in the rank-one product.
  state.b = 0.5 * (state.b + state.b.transpose()).eval();
  return true;
}

// ---------------------------------------------------------------- Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vector m, v;
  long step = 0;

  explicit AdamState(Eigen::Index n) : m(Vector::Zero(n)), v(Vector::Zero(n)) {}
};

inline Vector adam_step(AdamState& s, const AdamConfig& c, const Vector& x, const Vector& g) {
  ++s.step;
  s.m = c.beta1 * s.m + (1.0 - c.beta1) * g;
  s.v = c.beta2 * s.v + (1.0 - c.beta2) * g.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  const Vector mhat = s.m / bc1;
  const Vector vhat = s.v / bc2;
  return x - c.lr * mhat.cwiseQuotient((vhat.array().sqrt() + c.eps).matrix());
}

// ---------------------------------------------------------------- AdaHessian

enum class HessianDiagonal { analytic, hutchinson };

struct AdaHessianConfig {
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double hessian_power = 1.0;
  HessianDiagonal mode = HessianDiagonal::analytic;
  int probes = 1;
  std::uint64_t seed = 0;
};

/// diag(H) ~ mean over Rademacher z of z * (H z).
template <class Rng>
Vector hutchinson_diagonal(const Objective& obj, const Vector& x, int probes, Rng& rng) {
  if (probes < 1) throw std::invalid_argument("hutchinson_diagonal: probes must be >= 1");
  std::bernoulli_distribution coin(0.5);
  Vector acc = Vector::Zero(x.size());
  Vector z(x.size());
  for (int i = 0; i < probes; ++i) {
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = coin(rng) ? 1.0 : -1.0;
    acc += z.cwiseProduct(obj.hessian_vector(x, z));
  }
  return acc / static_cast<double>(probes);
}

struct AdaHessianState {
  AdamState moments;
  Rng rng;

  AdaHessianState(Eigen::Index n, std::uint64_t seed) : moments(n), rng(seeded_rng({seed, 0xada})) {}
};

/// Adam with the second moment driven by the squared Hessian diagonal.
inline Vector adahessian_step(AdaHessianState& s, const AdaHessianConfig& c, const Vector& x, const Vector& g,
                              const Vector& hessian_diag) {
  AdamState& st = s.moments;
  ++st.step;
  st.m = c.beta1 * st.m + (1.0 - c.beta1) * g;
  st.v = c.beta2 * st.v + (1.0 - c.beta2) * hessian_diag.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  const Vector mhat = st.m / bc1;
  const Vector denom = ((st.v / bc2).array().sqrt().pow(c.hessian_power) + c.eps).matrix();
  return x - c.lr * mhat.cwiseQuotient(denom);
}

// ---------------------------------------------------------------- solver loop

inline constexpr std::array<std::string_view, 6> kSolverNames = {"lsr1", "lsr1-noproj", "lbfgs",
                                                                 "adam", "sr1",         "adahessian"};

inline bool is_learned_solver(std::string_view name) { return name == "lsr1" || name == "lsr1-noproj"; }

inline void check_solver_name(std::string_view name) {
  for (std::string_view n : kSolverNames)
    if (n == name) return;
  throw std::invalid_argument("unknown solver '" + std::string(name) +
                              "' (expected lsr1, lsr1-noproj, lbfgs, adam, sr1 or adahessian)");
}

struct BaselineSettings {
  LbfgsConfig lbfgs;
  AdamConfig adam;
  Sr1Config sr1;
  AdaHessianConfig adahessian;

  [[nodiscard]] double lr(std::string_view solver) const {
    if (solver == "lbfgs") return lbfgs.lr;
    if (solver == "adam") return adam.lr;
    if (solver == "sr1") return sr1.lr;
    if (solver == "adahessian") return adahessian.lr;
    throw std::invalid_argument("solver '" + std::string(solver) + "' has no learning rate");
  }
  void set_lr(std::string_view solver, double lr) {
    if (solver == "lbfgs") lbfgs.lr = lr;
    else if (solver == "adam") adam.lr = lr;
    else if (solver == "sr1") sr1.lr = lr;
    else if (solver == "adahessian") adahessian.lr = lr;
    else throw std::invalid_argument("solver '" + std::string(solver) + "' has no learning rate");
  }
};

struct SolveResult {
  std::vector<double> values;  // f(x_0), ..., f(x_k) for the completed iterations
  Vector x;
  bool diverged = false;
  int iterations = 0;
  std::vector<Vector> iterates;  // x_0, ..., x_k when requested
};

/// Runs a classical solver for `iterations` steps.
inline SolveResult run_baseline(std::string_view solver, const Objective& obj, const Vector& x0, int iterations,
                                const BaselineSettings& s, bool record_iterates = false) {
  check_solver_name(solver);
  if (is_learned_solver(solver)) throw std::invalid_argument("run_baseline: '" + std::string(solver) + "' is learned");
  if (iterations < 1) throw std::invalid_argument("run_baseline: iteration budget must be >= 1");

  SolveResult out;
  out.x = x0;
  Vector g = obj.gradient(x0);
  out.values.push_back(obj.value(x0));
  if (record_iterates) out.iterates.push_back(x0);

  std::optional<LbfgsState> lbfgs;
  std::optional<Sr1State> sr1;
  std::optional<AdamState> adam;
  std::optional<AdaHessianState> ada;
  if (solver == "lbfgs") lbfgs.emplace(s.lbfgs.memory, s.lbfgs.curvature_eps);
  if (solver == "sr1") sr1.emplace(x0.size(), s.sr1.skip);
  if (solver == "adam") adam.emplace(x0.size());
  if (solver == "adahessian") ada.emplace(x0.size(), s.adahessian.seed);

  for (int k = 1; k <= iterations; ++k) {
    Vector x_next;
    if (lbfgs) {
      const Vector d = -lbfgs->direction(g);
      if (d.squaredNorm() == 0.0) {
        x_next = out.x;
      } else {
        x_next = out.x - detail::step_size(s.lbfgs.rule, s.lbfgs.lr, obj, g, d) * d;
      }
    } else if (sr1) {
      const Vector d = sr1->b * g;
      if (d.squaredNorm() == 0.0) {
        x_next = out.x;
      } else {
        double alpha = s.sr1.lr;
        // B may be indefinite; the exact rule needs positive curvature along d.
        try {
          alpha = detail::step_size(s.sr1.rule, s.sr1.lr, obj, g, d);
        } catch (const std::domain_error&) {
        }
        x_next = out.x - alpha * d;
      }
    } else if (adam) {
      x_next = adam_step(*adam, s.adam, out.x, g);
    } else {
      const Vector diag = s.adahessian.mode == HessianDiagonal::analytic
                              ? obj.hessian_diagonal(out.x)
                              : hutchinson_diagonal(obj, out.x, s.adahessian.probes, ada->rng);
      x_next = adahessian_step(*ada, s.adahessian, out.x, g, diag);
    }

    if (!x_next.allFinite()) {
      out.diverged = true;
      break;
    }
    const Vector g_next = obj.gradient(x_next);
    const double f_next = obj.value(x_next);
    if (!std::isfinite(f_next) || !g_next.allFinite()) {
      out.diverged = true;
      break;
    }
    if (lbfgs) lbfgs->push(x_next - out.x, g_next - g);
    if (sr1) sr1_update(*sr1, x_next - out.x, g_next - g);
    out.x = x_next;
    g = g_next;
    out.values.push_back(f_next);
    if (record_iterates) out.iterates.push_back(x_next);
    out.iterations = k;
  }
  return out;
}

/// Log-spaced grid from 1e-4 to 1 in half-decade steps.
inline std::vector<double> default_lr_grid() {
  std::vector<double> grid;
  for (int i = -8; i <= 0; ++i) grid.push_back(std::pow(10.0, 0.5 * i));
  return grid;
}

/// Whether a solver's step is governed by the tunable learning rate on this problem family.
inline bool uses_learning_rate(std::string_view solver, const BaselineSettings& s, bool quadratic_family) {
  if (solver == "lbfgs") return s.lbfgs.rule == StepRule::fixed || !quadratic_family;
  if (solver == "sr1") return s.sr1.rule == StepRule::fixed || !quadratic_family;
  return solver == "adam" || solver == "adahessian";
}

struct TuningResult {
  double lr = 0.0;
  double score = 0.0;  // mean final objective on the tuning problems
};

/// Picks the grid learning rate with the lowest mean final objective; diverged
/// runs score +inf and ties go to the smaller rate.
inline TuningResult tune_learning_rate(std::string_view solver, const ObjectiveBatch& problems, int iterations,
                                       BaselineSettings settings, const std::vector<double>& grid = default_lr_grid()) {
  if (grid.empty()) throw std::invalid_argument("tune_learning_rate: empty grid");
  TuningResult best{grid.front(), std::numeric_limits<double>::infinity()};
  bool first = true;
  for (double lr : grid) {
    settings.set_lr(solver, lr);
    double total = 0.0;
    for (std::size_t i = 0; i < problems.size(); ++i) {
      const SolveResult r = run_baseline(solver, *problems.objectives[i], problems.initial_points[i], iterations, settings);
      total += r.diverged ? std::numeric_limits<double>::infinity() : r.values.back();
    }
    const double score = total / static_cast<double>(problems.size());
    if (first || score < best.score) best = {lr, score};
    first = false;
  }
  return best;
}

}  // namespace lsr1
