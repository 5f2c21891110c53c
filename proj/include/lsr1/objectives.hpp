// Analytic benchmark objectives (quadratic, Rosenbrock, Rastrigin) and the
// random problem generators used for meta-training and evaluation.
//
// Every objective exposes plain Eigen evaluation (value, gradient, Hessian)
// and the same value/gradient as tape expressions, so meta-gradients can
// flow through the inner gradient.
#pragma once

#include "lsr1/autodiff.hpp"
#include "lsr1/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lsr1 {

enum class ObjectiveKind { quadratic, rosenbrock, rastrigin };

inline std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::quadratic:
      return "quadratic";
    case ObjectiveKind::rosenbrock:
      return "rosenbrock";
    case ObjectiveKind::rastrigin:
      return "rastrigin";
  }
  return "unknown";
}

inline ObjectiveKind parse_objective_kind(std::string_view s) {
  if (s == "quadratic") return ObjectiveKind::quadratic;
  if (s == "rosenbrock") return ObjectiveKind::rosenbrock;
  if (s == "rastrigin") return ObjectiveKind::rastrigin;
  throw std::invalid_argument("unknown objective kind '" + std::string(s) +
                              "' (expected quadratic, rosenbrock or rastrigin)");
}

class Objective {
 public:
  virtual ~Objective() = default;

  [[nodiscard]] virtual ObjectiveKind kind() const = 0;
  [[nodiscard]] virtual std::string describe() const = 0;
  [[nodiscard]] Eigen::Index dim() const noexcept { return dim_; }

  [[nodiscard]] virtual double value(const Vector& x) const = 0;
  [[nodiscard]] virtual Vector gradient(const Vector& x) const = 0;
  [[nodiscard]] virtual Matrix hessian(const Vector& x) const = 0;
  [[nodiscard]] virtual Vector hessian_vector(const Vector& x, const Vector& z) const { return hessian(x) * z; }
  [[nodiscard]] virtual Vector hessian_diagonal(const Vector& x) const { return hessian(x).diagonal(); }

  [[nodiscard]] virtual ad::Var value(ad::Tape& tape, const ad::Var& x) const = 0;
  [[nodiscard]] virtual ad::Var gradient(ad::Tape& tape, const ad::Var& x) const = 0;
  [[nodiscard]] virtual std::pair<ad::Var, ad::Var> value_and_gradient(ad::Tape& tape, const ad::Var& x) const {
    return {value(tape, x), gradient(tape, x)};
  }

  [[nodiscard]] const Vector& optimum() const noexcept { return optimum_; }
  [[nodiscard]] double optimal_value() const noexcept { return optimal_value_; }

 protected:
  explicit Objective(Eigen::Index dim) : dim_(dim) {
    if (dim < 1) throw std::invalid_argument("objective dimension must be >= 1");
  }

  void check(const Vector& x) const {
    if (x.size() != dim_) {
      throw std::invalid_argument(describe() + ": expected dimension " + std::to_string(dim_) + ", got " +
                                  std::to_string(x.size()));
    }
  }

  void check(const ad::Var& x) const {
    if (x.rows() != dim_ || x.cols() != 1) {
      throw ad::ShapeError(describe() + ": expected shape " + ad::shape_string(dim_, 1) + ", got " +
                           ad::shape_string(x.value()));
    }
  }

  Eigen::Index dim_;
  Vector optimum_;
  double optimal_value_ = 0.0;
};

using ObjectivePtr = std::shared_ptr<const Objective>;

/// f(x) = 1/2 x^T H x + b^T x with symmetric positive semi-definite H.
class QuadraticObjective final : public Objective {
 public:
  QuadraticObjective(Matrix hessian, Vector linear) : Objective(hessian.rows()), h_(std::move(hessian)), b_(std::move(linear)) {
    if (h_.rows() != h_.cols() || b_.size() != h_.rows()) {
      throw std::invalid_argument("quadratic: H must be square and match b");
    }
    const double scale = std::max(1.0, h_.cwiseAbs().maxCoeff());
    if ((h_ - h_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw std::invalid_argument("quadratic: H is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(h_, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-10 * scale) {
      throw std::invalid_argument("quadratic: H is not positive semi-definite");
    }
    // Minimum-norm stationary point; exact when H is nonsingular.
    optimum_ = h_.completeOrthogonalDecomposition().solve(-b_);
    optimal_value_ = value(optimum_);
  }

  [[nodiscard]] ObjectiveKind kind() const override { return ObjectiveKind::quadratic; }
  [[nodiscard]] std::string describe() const override { return "quadratic(N=" + std::to_string(dim_) + ")"; }
  [[nodiscard]] const Matrix& h() const noexcept { return h_; }
  [[nodiscard]] const Vector& b() const noexcept { return b_; }

  [[nodiscard]] double value(const Vector& x) const override {
    check(x);
    return 0.5 * x.dot(h_ * x) + b_.dot(x);
  }
  [[nodiscard]] Vector gradient(const Vector& x) const override {
    check(x);
    return h_ * x + b_;
  }
  [[nodiscard]] Matrix hessian(const Vector& x) const override {
    check(x);
    return h_;
  }
  [[nodiscard]] Vector hessian_vector(const Vector& x, const Vector& z) const override {
    check(x);
    return h_ * z;
  }

  [[nodiscard]] ad::Var value(ad::Tape& tape, const ad::Var& x) const override { return value_and_gradient(tape, x).first; }
  [[nodiscard]] ad::Var gradient(ad::Tape& tape, const ad::Var& x) const override {
    check(x);
    return ad::matvec(tape.constant(h_), x) + tape.constant(b_);
  }
  [[nodiscard]] std::pair<ad::Var, ad::Var> value_and_gradient(ad::Tape& tape, const ad::Var& x) const override {
    check(x);
    ad::Var hx = ad::matvec(tape.constant(h_), x);
    ad::Var b = tape.constant(b_);
    ad::Var f = 0.5 * ad::dot(x, hx) + ad::dot(b, x);
    return {f, hx + b};
  }

 private:
  Matrix h_;
  Vector b_;
};

/// sum_i 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2, minimum 0 at (1, ..., 1).
class RosenbrockObjective final : public Objective {
 public:
  explicit RosenbrockObjective(Eigen::Index dim) : Objective(dim) {
    if (dim < 2) throw std::invalid_argument("rosenbrock: dimension must be >= 2");
    optimum_ = Vector::Ones(dim);
    optimal_value_ = 0.0;
  }

  [[nodiscard]] ObjectiveKind kind() const override { return ObjectiveKind::rosenbrock; }
  [[nodiscard]] std::string describe() const override { return "rosenbrock(N=" + std::to_string(dim_) + ")"; }

  [[nodiscard]] double value(const Vector& x) const override {
    check(x);
    const auto head = x.head(dim_ - 1).array();
    const auto tail = x.tail(dim_ - 1).array();
    return (100.0 * (tail - head.square()).square() + (1.0 - head).square()).sum();
  }

  [[nodiscard]] Vector gradient(const Vector& x) const override {
    check(x);
    const Eigen::Index n = dim_;
    Vector g = Vector::Zero(n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      const double r = x(i + 1) - x(i) * x(i);
      g(i) += -400.0 * x(i) * r - 2.0 * (1.0 - x(i));
      g(i + 1) += 200.0 * r;
    }
    return g;
  }

  [[nodiscard]] Matrix hessian(const Vector& x) const override {
    check(x);
    const Eigen::Index n = dim_;
    Matrix h = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      h(i, i) += 1200.0 * x(i) * x(i) - 400.0 * x(i + 1) + 2.0;
      h(i + 1, i + 1) += 200.0;
      h(i, i + 1) = -400.0 * x(i);
      h(i + 1, i) = -400.0 * x(i);
    }
    return h;
  }

  [[nodiscard]] Vector hessian_vector(const Vector& x, const Vector& z) const override {
    check(x);
    const Eigen::Index n = dim_;
    Vector out = Vector::Zero(n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      out(i) += (1200.0 * x(i) * x(i) - 400.0 * x(i + 1) + 2.0) * z(i) - 400.0 * x(i) * z(i + 1);
      out(i + 1) += 200.0 * z(i + 1) - 400.0 * x(i) * z(i);
    }
    return out;
  }

  [[nodiscard]] Vector hessian_diagonal(const Vector& x) const override {
    check(x);
    Vector d = Vector::Zero(dim_);
    for (Eigen::Index i = 0; i + 1 < dim_; ++i) {
      d(i) += 1200.0 * x(i) * x(i) - 400.0 * x(i + 1) + 2.0;
      d(i + 1) += 200.0;
    }
    return d;
  }

  [[nodiscard]] ad::Var value(ad::Tape&, const ad::Var& x) const override {
    check(x);
    const Eigen::Index m = dim_ - 1;
    ad::Var head = ad::slice_rows(x, 0, m);
    ad::Var tail = ad::slice_rows(x, 1, m);
    ad::Var r = tail - ad::pow_scalar(head, 2.0);
    ad::Var one_minus = 1.0 - head;
    return 100.0 * ad::norm_sq(r) + ad::norm_sq(one_minus);
  }

  [[nodiscard]] ad::Var gradient(ad::Tape& tape, const ad::Var& x) const override {
    return value_and_gradient(tape, x).second;
  }

  [[nodiscard]] std::pair<ad::Var, ad::Var> value_and_gradient(ad::Tape&, const ad::Var& x) const override {
    check(x);
    const Eigen::Index m = dim_ - 1;
    ad::Var head = ad::slice_rows(x, 0, m);
    ad::Var tail = ad::slice_rows(x, 1, m);
    ad::Var r = tail - ad::pow_scalar(head, 2.0);
    ad::Var one_minus = 1.0 - head;
    ad::Var f = 100.0 * ad::norm_sq(r) + ad::norm_sq(one_minus);
    // d/dx_i of the i-th term, then d/dx_{i+1} of the same term.
    ad::Var lead = -400.0 * (head * r) - 2.0 * one_minus;
    ad::Var trail = 200.0 * r;
    ad::Var g = ad::pad_rows(lead, 0, 1) + ad::pad_rows(trail, 1, 0);
    return {f, g};
  }
};

/// 10 N + sum_i x_i^2 - 10 cos(2 pi x_i), minimum 0 at the origin.
class RastriginObjective final : public Objective {
 public:
  explicit RastriginObjective(Eigen::Index dim) : Objective(dim) {
    optimum_ = Vector::Zero(dim);
    optimal_value_ = 0.0;
  }

  [[nodiscard]] ObjectiveKind kind() const override { return ObjectiveKind::rastrigin; }
  [[nodiscard]] std::string describe() const override { return "rastrigin(N=" + std::to_string(dim_) + ")"; }

  [[nodiscard]] double value(const Vector& x) const override {
    check(x);
    const auto a = x.array();
    return 10.0 * static_cast<double>(dim_) + (a.square() - 10.0 * (kTwoPi * a).cos()).sum();
  }
  [[nodiscard]] Vector gradient(const Vector& x) const override {
    check(x);
    const auto a = x.array();
    return (2.0 * a + 10.0 * kTwoPi * (kTwoPi * a).sin()).matrix();
  }
  [[nodiscard]] Matrix hessian(const Vector& x) const override { return hessian_diagonal(x).asDiagonal(); }
  [[nodiscard]] Vector hessian_vector(const Vector& x, const Vector& z) const override {
    return hessian_diagonal(x).cwiseProduct(z);
  }
  [[nodiscard]] Vector hessian_diagonal(const Vector& x) const override {
    check(x);
    return (2.0 + 10.0 * kTwoPi * kTwoPi * (kTwoPi * x.array()).cos()).matrix();
  }

  [[nodiscard]] ad::Var value(ad::Tape&, const ad::Var& x) const override {
    check(x);
    return ad::norm_sq(x) - 10.0 * ad::sum(ad::cos(kTwoPi * x)) + 10.0 * static_cast<double>(dim_);
  }
  [[nodiscard]] ad::Var gradient(ad::Tape&, const ad::Var& x) const override {
    check(x);
    return 2.0 * x + (10.0 * kTwoPi) * ad::sin(kTwoPi * x);
  }

 private:
  static constexpr double kTwoPi = 2.0 * std::numbers::pi;
};

/// Condition number of a symmetric matrix; infinity when singular or indefinite.
inline double condition_number(const Matrix& h) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(h, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

/// H = A^T A with A standard normal, optionally rejected until cond(H) <= max_cond,
/// then scaled to unit Frobenius norm; b standard normal scaled to unit length.
template <class Rng>
std::shared_ptr<QuadraticObjective> quadratic_random(Eigen::Index n, Rng& rng,
                                                     std::optional<double> max_cond = std::nullopt) {
  if (n < 1) throw std::invalid_argument("quadratic_random: N must be >= 1");
  if (max_cond && *max_cond < 1.0) throw std::invalid_argument("quadratic_random: max_cond must be >= 1");
  constexpr int kMaxAttempts = 10000;
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix h;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxAttempts) {
      throw std::runtime_error("quadratic_random: no matrix with cond <= " + std::to_string(*max_cond) + " after " +
                               std::to_string(kMaxAttempts) + " attempts");
    }
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = normal(rng);
    h = a.transpose() * a;
    h = 0.5 * (h + h.transpose()).eval();
    if (!max_cond || condition_number(h) <= *max_cond) break;
  }
  h /= h.norm();
  Vector b(n);
  for (Eigen::Index i = 0; i < n; ++i) b(i) = normal(rng);
  b /= b.norm();
  return std::make_shared<QuadraticObjective>(std::move(h), std::move(b));
}

/// Diagonal H with log-spaced eigenvalues in [1/cond, 1], unit Frobenius norm, b = 0.
inline std::shared_ptr<QuadraticObjective> quadratic_diagonal(Eigen::Index n, double cond) {
  if (n < 1) throw std::invalid_argument("quadratic_diagonal: N must be >= 1");
  if (!(cond >= 1.0)) throw std::invalid_argument("quadratic_diagonal: cond must be >= 1");
  Vector diag(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    diag(i) = std::pow(cond, -t);
  }
  diag /= diag.norm();
  return std::make_shared<QuadraticObjective>(Matrix(diag.asDiagonal()), Vector::Zero(n));
}

/// d = -H(x)^{-1} g(x). Throws when the Hessian is singular or indefinite.
class NewtonError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Vector newton_direction(const Objective& obj, const Vector& x) {
  const Matrix h = obj.hessian(x);
  const Vector g = obj.gradient(x);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
  const Vector& lambda = eig.eigenvalues();
  const double top = lambda.cwiseAbs().maxCoeff();
  if (!(top > 0.0)) throw NewtonError("newton_direction: zero Hessian");
  if (lambda.minCoeff() < -1e-10 * top) throw NewtonError("newton_direction: indefinite Hessian");
  if (lambda.minCoeff() <= 0.0 || top / lambda.minCoeff() >= 1e12) {
    throw NewtonError("newton_direction: Hessian is numerically singular");
  }
  const Matrix& v = eig.eigenvectors();
  return -(v * (v.transpose() * g).cwiseQuotient(lambda));
}

/// A family of problems that a batch is drawn from.
struct ProblemSpec {
  ObjectiveKind kind = ObjectiveKind::quadratic;
  Eigen::Index dim = 2;
  // Random dense quadratic (b != 0) unless a diagonal condition number is set.
  std::optional<double> diagonal_cond;
  // Rejection threshold for random quadratics; unset accepts every draw.
  std::optional<double> max_cond;
  double init_low = -2.0;
  double init_high = 2.0;
};

struct ObjectiveBatch {
  std::vector<ObjectivePtr> objectives;
  std::vector<Vector> initial_points;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t size() const noexcept { return objectives.size(); }
};

template <class Rng>
Vector uniform_point(Eigen::Index n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector x(n);
  for (Eigen::Index i = 0; i < n; ++i) x(i) = u(rng);
  return x;
}

template <class Rng>
ObjectivePtr make_objective(const ProblemSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case ObjectiveKind::quadratic:
      if (spec.diagonal_cond) return quadratic_diagonal(spec.dim, *spec.diagonal_cond);
      return quadratic_random(spec.dim, rng, spec.max_cond);
    case ObjectiveKind::rosenbrock:
      return std::make_shared<RosenbrockObjective>(spec.dim);
    case ObjectiveKind::rastrigin:
      return std::make_shared<RastriginObjective>(spec.dim);
  }
  throw std::invalid_argument("make_objective: unknown kind");
}

/// Element i draws from its own substream of `seed`, so batches are
/// reproducible and independent of generation order.
inline ObjectiveBatch make_batch(const ProblemSpec& spec, std::size_t size, std::uint64_t seed) {
  if (!(spec.init_low < spec.init_high)) throw std::invalid_argument("make_batch: empty initial-point range");
  ObjectiveBatch batch;
  batch.seed = seed;
  batch.objectives.reserve(size);
  batch.initial_points.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    auto rng = substream(seed, i);
    batch.objectives.push_back(make_objective(spec, rng));
    batch.initial_points.push_back(uniform_point(spec.dim, spec.init_low, spec.init_high, rng));
  }
  return batch;
}

}  // namespace lsr1
