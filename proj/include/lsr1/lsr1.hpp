// The L-SR1 optimizer: feature assembly, learned vector and step-size
// generation, the FIFO vector buffer, the limited-memory preconditioner
// B = [I] + sum v v^T, and the update x <- x - alpha * d.
//
// Every operation exists in a plain (Eigen) form and a tape form. The tape
// form is what meta-training differentiates through; inference reuses it with
// constant leaves, discarding each step's nodes so memory stays O(1) in K.
#pragma once

#include "lsr1/autodiff.hpp"
#include "lsr1/csv.hpp"
#include "lsr1/model.hpp"
#include "lsr1/objectives.hpp"

#include <deque>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsr1 {

struct LsrOneConfig {
  int buffer = 8;
  double gamma1 = 0.4;
  double gamma2 = 0.001;
  FeatureMask features;
  // Adds B0 = I while the buffer holds fewer than `buffer` vectors.
  bool include_identity = true;

  void validate() const {
    if (buffer < 1) throw std::invalid_argument("lsr1: buffer size L must be >= 1");
    if (!(gamma1 > 0.0) || !(gamma2 > 0.0)) throw std::invalid_argument("lsr1: gamma1 and gamma2 must be > 0");
  }
};

/// Raised when an iterate, gradient or generated quantity stops being finite.
class IterationError : public ad::NumericError {
 public:
  IterationError(int iteration, const std::string& what)
      : ad::NumericError("iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
  [[nodiscard]] int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

/// Fixed-capacity FIFO; oldest first, newest last.
template <class T>
class VectorBuffer {
 public:
  explicit VectorBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("VectorBuffer: capacity must be >= 1");
  }

  void push(T v) {
    if (static_cast<int>(entries_.size()) == capacity_) entries_.pop_front();
    entries_.push_back(std::move(v));
  }

  [[nodiscard]] int capacity() const noexcept { return capacity_; }
  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
  [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }
  [[nodiscard]] bool full() const noexcept { return static_cast<int>(entries_.size()) == capacity_; }
  [[nodiscard]] const T& operator[](std::size_t i) const { return entries_[i]; }
  [[nodiscard]] auto begin() const { return entries_.begin(); }
  [[nodiscard]] auto end() const { return entries_.end(); }

 private:
  int capacity_;
  std::deque<T> entries_;
};

template <class T>
struct IterateState {
  T x, g, p, q, d;
  int k = 0;
};

using PlainState = IterateState<Vector>;
using TapeState = IterateState<ad::Var>;

inline PlainState initial_state(const Objective& obj, const Vector& x0) {
  PlainState s;
  s.x = x0;
  s.g = obj.gradient(x0);
  s.p = x0;
  s.q = s.g;
  s.d = s.g;
  return s;
}

inline TapeState initial_state(ad::Tape& tape, const Objective& obj, const Vector& x0) {
  TapeState s;
  s.x = tape.constant(x0);
  s.g = obj.gradient(tape, s.x);
  s.p = s.x;
  s.q = s.g;
  s.d = s.g;
  return s;
}

inline Matrix assemble_features(const PlainState& s, const FeatureMask& mask) {
  const Vector* channels[] = {&s.x, &s.p, &s.d, &s.g, &s.q};
  Matrix out(s.x.size(), mask.count());
  Eigen::Index c = 0;
  for (unsigned i = 0; i < 5; ++i)
    if (mask.contains(static_cast<Feature>(i))) out.col(c++) = *channels[i];
  return out;
}

inline ad::Var assemble_features(const TapeState& s, const FeatureMask& mask) {
  const ad::Var* channels[] = {&s.x, &s.p, &s.d, &s.g, &s.q};
  std::vector<ad::Var> parts;
  for (unsigned i = 0; i < 5; ++i)
    if (mask.contains(static_cast<Feature>(i))) parts.push_back(*channels[i]);
  return ad::concat_cols(parts);
}

namespace detail {

inline void check_operator(std::size_t buffered, bool include_identity) {
  if (buffered == 0 && !include_identity) {
    throw std::invalid_argument("apply_preconditioner: empty buffer without the identity term gives a zero direction");
  }
}

}  // namespace detail

/// d = [g] + sum_i v_i (v_i^T g); the identity applies only while the buffer is not full.
inline Vector apply_preconditioner(const VectorBuffer<Vector>& buffer, const Vector& g, bool include_identity) {
  detail::check_operator(buffer.size(), include_identity);
  Vector d = include_identity && !buffer.full() ? Vector(g) : Vector::Zero(g.size());
  for (const Vector& v : buffer) {
    if (v.size() != g.size()) throw std::invalid_argument("apply_preconditioner: dimension mismatch");
    d.noalias() += v * v.dot(g);
  }
  return d;
}

inline ad::Var apply_preconditioner(const VectorBuffer<ad::Var>& buffer, const ad::Var& g, bool include_identity) {
  detail::check_operator(buffer.size(), include_identity);
  std::optional<ad::Var> d;
  if (include_identity && !buffer.full()) d = g;
  for (const ad::Var& v : buffer) {
    ad::Var term = v * ad::dot(v, g);
    d = d ? *d + term : term;
  }
  return *d;
}

inline double secant_residual(const VectorBuffer<Vector>& buffer, const Vector& p, const Vector& q,
                              bool include_identity) {
  return (p - apply_preconditioner(buffer, q, include_identity)).squaredNorm();
}

inline ad::Var secant_residual(const VectorBuffer<ad::Var>& buffer, const ad::Var& p, const ad::Var& q,
                               bool include_identity) {
  return ad::norm_sq(p - apply_preconditioner(buffer, q, include_identity));
}

/// Tape nodes produced by one iteration.
struct StepResult {
  ad::Var value;     // f(x_k)
  ad::Var residual;  // ||p_k - B_k q_k||^2
  ad::Var v;
  ad::Var alpha;
  ad::Var d;
};

/// One iteration: features -> (v, alpha) -> push v -> d = B g -> x -= alpha * d
/// -> refresh g, p, q. `dropout_rng` enables dropout during training;
/// `detach_secant` stops the residual's gradient from flowing through p and q.
inline StepResult step(TapeState& state, VectorBuffer<ad::Var>& buffer, const BoundModel& model,
                       const Objective& obj, const LsrOneConfig& cfg, Rng* dropout_rng = nullptr,
                       bool detach_secant = false) {
  if (!(cfg.features == model.config->features)) {
    throw std::invalid_argument("lsr1 step: feature mask differs from the model's encoder inputs");
  }
  const int k = state.k + 1;
  try {
    StepResult r;
    const ad::Var latent = encode(model, assemble_features(state, cfg.features), dropout_rng);
    r.v = generate_vector(model, latent, dropout_rng);
    r.alpha = generate_lr(model, latent, cfg.gamma1, cfg.gamma2, dropout_rng);
    buffer.push(r.v);
    r.d = apply_preconditioner(buffer, state.g, cfg.include_identity);
    const ad::Var x = state.x - r.alpha * r.d;
    auto [f, g] = obj.value_and_gradient(x.tape(), x);
    state.p = x - state.x;
    state.q = g - state.g;
    state.x = x;
    state.g = g;
    state.d = r.d;
    state.k = k;
    r.value = f;
    ad::Tape& tape = x.tape();
    r.residual = detach_secant ? secant_residual(buffer, tape.constant(state.p.value()), tape.constant(state.q.value()),
                                                 cfg.include_identity)
                               : secant_residual(buffer, state.p, state.q, cfg.include_identity);
    return r;
  } catch (const IterationError&) {
    throw;
  } catch (const ad::NumericError& e) {
    throw IterationError(k, e.what());
  }
}

struct TrajectoryRow {
  int k = 0;
  double value = 0.0;
  double grad_norm = 0.0;
  double d_norm = 0.0;
  double alpha_min = 0.0;
  double alpha_max = 0.0;
  double secant_residual = 0.0;
  std::optional<double> cosine;
  // Iterate before the step, the step sizes and the direction of this row.
  Vector x_prev;
  Vector alpha;
  Vector d;
  Vector x;
};

struct Trajectory {
  double initial_value = 0.0;
  Vector x0;
  std::vector<TrajectoryRow> rows;  // k = 1..K

  [[nodiscard]] double final_value() const { return rows.empty() ? initial_value : rows.back().value; }
  [[nodiscard]] const Vector& final_point() const { return rows.empty() ? x0 : rows.back().x; }
};

/// Inference run of K iterations. No meta-gradients are recorded.
inline Trajectory run(const Objective& obj, const Vector& x0, const LsrOneModel& model, const LsrOneConfig& cfg,
                      int iterations) {
  if (iterations < 1) throw std::invalid_argument("lsr1 run: iteration budget K must be >= 1");
  cfg.validate();
  Trajectory traj;
  traj.x0 = x0;
  traj.initial_value = obj.value(x0);

  PlainState state = initial_state(obj, x0);
  VectorBuffer<Vector> buffer(cfg.buffer);
  ad::Tape tape;
  const BoundModel bound = bind(tape, model, false);
  const std::size_t mark = tape.size();
  for (int k = 1; k <= iterations; ++k) {
    tape.truncate(mark);
    TapeState ts{tape.constant(state.x), tape.constant(state.g), tape.constant(state.p), tape.constant(state.q),
                 tape.constant(state.d), state.k};
    VectorBuffer<ad::Var> tb(cfg.buffer);
    for (const Vector& v : buffer) tb.push(tape.constant(v));

    const StepResult r = step(ts, tb, bound, obj, cfg);

    TrajectoryRow row;
    row.k = k;
    row.x_prev = state.x;
    state = PlainState{ts.x.value(), ts.g.value(), ts.p.value(), ts.q.value(), ts.d.value(), ts.k};
    buffer.push(r.v.value());
    row.value = r.value.scalar();
    row.grad_norm = state.g.norm();
    row.d_norm = state.d.norm();
    row.alpha = r.alpha.value();
    row.alpha_min = row.alpha.minCoeff();
    row.alpha_max = row.alpha.maxCoeff();
    row.secant_residual = r.residual.scalar();
    row.d = state.d;
    row.x = state.x;
    traj.rows.push_back(std::move(row));
  }
  return traj;
}

inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  const bool with_cosine = !traj.rows.empty() && traj.rows.front().cosine.has_value();
  CsvWriter csv(out);
  std::vector<std::string> cols = {"k", "f", "grad_norm", "d_norm", "alpha_min", "alpha_max", "secant_residual"};
  if (with_cosine) cols.emplace_back("cosine");
  csv.header(cols);
  for (const TrajectoryRow& r : traj.rows) {
    csv.cell(r.k).cell(r.value).cell(r.grad_norm).cell(r.d_norm).cell(r.alpha_min).cell(r.alpha_max).cell(
        r.secant_residual);
    if (with_cosine) csv.cell(r.cosine.value_or(std::numeric_limits<double>::quiet_NaN()));
    csv.end_row();
  }
}

}  // namespace lsr1
