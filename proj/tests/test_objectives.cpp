#include "lsr1/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using lsr1::Matrix;
using lsr1::Vector;

namespace {

Vector fd_gradient(const lsr1::Objective& obj, const Vector& x, double h = 1e-6) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector a = x, b = x;
    a(i) += h;
    b(i) -= h;
    g(i) = (obj.value(a) - obj.value(b)) / (2 * h);
  }
  return g;
}

Matrix fd_hessian(const lsr1::Objective& obj, const Vector& x, double h = 1e-6) {
  Matrix H(x.size(), x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector a = x, b = x;
    a(i) += h;
    b(i) -= h;
    H.col(i) = (obj.gradient(a) - obj.gradient(b)) / (2 * h);
  }
  return H;
}

double rel(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-8});
}

std::vector<lsr1::ObjectivePtr> sample_objectives(std::uint64_t seed) {
  auto rng = lsr1::substream(seed, 0);
  return {lsr1::quadratic_random(5, rng), std::make_shared<lsr1::RosenbrockObjective>(5),
          std::make_shared<lsr1::RastriginObjective>(5), lsr1::quadratic_diagonal(5, 100.0)};
}

}  // namespace

TEST(QuadraticRandom, UnitNormalization) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto rng = lsr1::substream(seed, 1);
    auto q = lsr1::quadratic_random(2, rng);
    EXPECT_NEAR(q->h().norm(), 1.0, 1e-12);
    EXPECT_NEAR(q->b().norm(), 1.0, 1e-12);
  }
}

TEST(QuadraticRandom, OneDimensional) {
  auto rng = lsr1::substream(3, 0);
  auto q = lsr1::quadratic_random(1, rng);
  EXPECT_NEAR(q->h()(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(q->b()(0)), 1.0, 1e-15);
}

TEST(QuadraticRandom, ConditionCapIsRespected) {
  auto rng = lsr1::substream(5, 0);
  for (int i = 0; i < 1000; ++i) {
    auto q = lsr1::quadratic_random(2, rng, 1000.0);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(q->h());
    EXPECT_LE(eig.eigenvalues().maxCoeff() / eig.eigenvalues().minCoeff(), 1000.0 * (1 + 1e-12));
  }
}

TEST(QuadraticRandom, RejectsInvalidCap) {
  auto rng = lsr1::substream(0, 0);
  EXPECT_THROW(lsr1::quadratic_random(2, rng, 0.5), std::invalid_argument);
}

TEST(QuadraticRandom, ImpossibleCapTerminates) {
  auto rng = lsr1::substream(0, 0);
  // Random 8x8 Wishart draws essentially never have cond <= 1.0001.
  EXPECT_THROW(lsr1::quadratic_random(8, rng, 1.0001), std::runtime_error);
}

TEST(QuadraticDiagonal, UnitConditionIsScaledIdentity) {
  auto q = lsr1::quadratic_diagonal(4, 1.0);
  EXPECT_LT((q->h() - Matrix::Identity(4, 4) / 2.0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(QuadraticDiagonal, ConditionRatio) {
  auto q = lsr1::quadratic_diagonal(4, 100.0);
  const Vector d = q->h().diagonal();
  EXPECT_NEAR(d.maxCoeff() / d.minCoeff(), 100.0, 1e-9);
  EXPECT_NEAR(q->h().norm(), 1.0, 1e-12);
  EXPECT_EQ(q->gradient(Vector::Zero(4)), Vector::Zero(4));
  EXPECT_THROW(lsr1::quadratic_diagonal(4, 0.5), std::invalid_argument);
}

TEST(Quadratic, HandEvaluation) {
  Matrix H(2, 2);
  H << 2, 0, 0, 4;
  lsr1::QuadraticObjective q(H, Vector::Zero(2));
  const Vector x = Vector::Ones(2);
  EXPECT_DOUBLE_EQ(q.value(x), 3.0);
  EXPECT_EQ(q.gradient(x), Vector((Vector(2) << 2, 4).finished()));
  EXPECT_EQ(q.hessian(x), H);
}

TEST(Quadratic, RejectsAsymmetricOrIndefinite) {
  Matrix A(2, 2);
  A << 1, 2, 0, 1;
  EXPECT_THROW(lsr1::QuadraticObjective(A, Vector::Zero(2)), std::invalid_argument);
  Matrix B(2, 2);
  B << 1, 0, 0, -1;
  EXPECT_THROW(lsr1::QuadraticObjective(B, Vector::Zero(2)), std::invalid_argument);
}

TEST(Objective, DimensionMismatch) {
  lsr1::RastriginObjective r(3);
  EXPECT_THROW((void)r.value(Vector::Zero(2)), std::invalid_argument);
  lsr1::ad::Tape t;
  EXPECT_THROW((void)r.value(t, t.leaf(Vector::Zero(4))), lsr1::ad::ShapeError);
}

TEST(Benchmarks, GlobalMinima) {
  lsr1::RastriginObjective rast(6);
  EXPECT_EQ(rast.value(Vector::Zero(6)), 0.0);
  EXPECT_EQ(rast.gradient(Vector::Zero(6)), Vector::Zero(6));
  lsr1::RosenbrockObjective rosen(2);
  EXPECT_EQ(rosen.value(Vector::Ones(2)), 0.0);
  EXPECT_EQ(rosen.gradient(Vector::Ones(2)), Vector::Zero(2));
  for (const auto& obj : sample_objectives(9)) {
    EXPECT_NEAR(obj->value(obj->optimum()), obj->optimal_value(), 1e-10) << obj->describe();
    EXPECT_LT(obj->gradient(obj->optimum()).norm(), 1e-8) << obj->describe();
  }
}

TEST(Benchmarks, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (const auto& obj : sample_objectives(4)) {
    for (int i = 0; i < 100; ++i) {
      const Vector x = lsr1::uniform_point(obj->dim(), -2.0, 2.0, rng);
      EXPECT_LT(rel(obj->gradient(x), fd_gradient(*obj, x)), 1e-6) << obj->describe();
    }
  }
}

TEST(Benchmarks, HessianMatchesFiniteDifferences) {
  std::mt19937_64 rng(22);
  for (const auto& obj : sample_objectives(5)) {
    for (int i = 0; i < 100; ++i) {
      const Vector x = lsr1::uniform_point(obj->dim(), -2.0, 2.0, rng);
      const Matrix H = obj->hessian(x);
      EXPECT_LT(rel(H, fd_hessian(*obj, x)), 1e-5) << obj->describe();
      const Vector z = lsr1::uniform_point(obj->dim(), -1.0, 1.0, rng);
      EXPECT_LT(rel(obj->hessian_vector(x, z), H * z), 1e-12) << obj->describe();
      EXPECT_LT(rel(obj->hessian_diagonal(x), H.diagonal()), 1e-12) << obj->describe();
    }
  }
}

TEST(Benchmarks, TapeExpressionsMatchPlainEvaluation) {
  std::mt19937_64 rng(23);
  for (const auto& obj : sample_objectives(6)) {
    const Vector x = lsr1::uniform_point(obj->dim(), -2.0, 2.0, rng);
    lsr1::ad::Tape t;
    auto xv = t.leaf(x, true);
    auto [f, g] = obj->value_and_gradient(t, xv);
    EXPECT_NEAR(f.scalar(), obj->value(x), 1e-12 * std::max(1.0, std::abs(obj->value(x))));
    EXPECT_LT(rel(g.value(), obj->gradient(x)), 1e-13);
    EXPECT_LT(rel(obj->gradient(t, xv).value(), obj->gradient(x)), 1e-13);
    // Reverse mode through the value reproduces the analytic gradient.
    EXPECT_LT(rel(t.backward(f)[xv], obj->gradient(x)), 1e-12);
    // Differentiating a linear functional of the tape gradient gives H z.
    const Vector z = lsr1::uniform_point(obj->dim(), -1.0, 1.0, rng);
    EXPECT_LT(rel(t.backward(lsr1::ad::dot(t.constant(z), g))[xv], obj->hessian(x) * z), 1e-12);
  }
}

TEST(Newton, QuadraticReachesOptimumInOneStep) {
  auto rng = lsr1::substream(31, 0);
  auto q = lsr1::quadratic_random(6, rng, 1000.0);
  const Vector x = Vector::Ones(6);
  const Vector d = lsr1::newton_direction(*q, x);
  const Vector xstar = -q->h().ldlt().solve(q->b());
  EXPECT_LT((x + d - xstar).norm(), 1e-9);
}

TEST(Newton, IdentityHessianGivesNegativeGradient) {
  lsr1::QuadraticObjective q(Matrix::Identity(3, 3), Vector::Ones(3));
  const Vector x = (Vector(3) << 1, -2, 0.5).finished();
  EXPECT_LT((lsr1::newton_direction(q, x) + q.gradient(x)).norm(), 1e-15);
}

TEST(Newton, RosenbrockAtOriginMatchesExplicitInverse) {
  lsr1::RosenbrockObjective rosen(2);
  const Vector x = Vector::Zero(2);
  // Hessian at the origin is [[2, 0], [0, 200]]; explicit 2x2 inverse.
  const double a = 2, b = 0, c = 0, d = 200;
  const double det = a * d - b * c;
  Matrix inv(2, 2);
  inv << d / det, -b / det, -c / det, a / det;
  const Vector expected = inv * Vector((Vector(2) << 2, 0).finished());
  EXPECT_LT((lsr1::newton_direction(rosen, x) - expected).norm(), 1e-14);
}

TEST(Newton, RejectsSingularAndIndefinite) {
  Matrix H = Matrix::Zero(2, 2);
  H(0, 0) = 1.0;
  lsr1::QuadraticObjective singular(H, Vector::Zero(2));
  EXPECT_THROW(lsr1::newton_direction(singular, Vector::Ones(2)), lsr1::NewtonError);
  lsr1::RastriginObjective rast(2);
  // cos(2 pi 0.5) = -1 makes the diagonal 2 - 10 (2 pi)^2 < 0.
  EXPECT_THROW(lsr1::newton_direction(rast, Vector::Constant(2, 0.5)), lsr1::NewtonError);
}

TEST(Batches, ReproducibleAndIndependentOfSize) {
  lsr1::ProblemSpec spec;
  spec.dim = 4;
  const auto a = lsr1::make_batch(spec, 8, 77);
  const auto b = lsr1::make_batch(spec, 3, 77);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& qa = dynamic_cast<const lsr1::QuadraticObjective&>(*a.objectives[i]);
    const auto& qb = dynamic_cast<const lsr1::QuadraticObjective&>(*b.objectives[i]);
    EXPECT_EQ(qa.h(), qb.h());
    EXPECT_EQ(qa.b(), qb.b());
    EXPECT_EQ(a.initial_points[i], b.initial_points[i]);
  }
  const auto c = lsr1::make_batch(spec, 8, 78);
  EXPECT_NE(a.initial_points[0], c.initial_points[0]);
  for (const Vector& x0 : a.initial_points) {
    EXPECT_EQ(x0.size(), 4);
    EXPECT_LE(x0.cwiseAbs().maxCoeff(), 2.0);
  }
}

TEST(Batches, KindsAndParsing) {
  EXPECT_EQ(lsr1::parse_objective_kind("rastrigin"), lsr1::ObjectiveKind::rastrigin);
  EXPECT_THROW(lsr1::parse_objective_kind("ackley"), std::invalid_argument);
  lsr1::ProblemSpec spec;
  spec.kind = lsr1::ObjectiveKind::rosenbrock;
  spec.dim = 3;
  EXPECT_EQ(lsr1::make_batch(spec, 2, 0).objectives[1]->kind(), lsr1::ObjectiveKind::rosenbrock);
}
