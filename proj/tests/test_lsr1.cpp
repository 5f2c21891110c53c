#include "lsr1/lsr1.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using lsr1::Matrix;
using lsr1::Vector;
namespace ad = lsr1::ad;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Vector random_vector(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = z(rng);
  return v;
}

// Independent straight-line forward pass of the element-wise MLP in plain Eigen.
Matrix oracle_linear(const lsr1::Linear<Matrix>& l, const Matrix& x) {
  Matrix out = x * l.weight.transpose();
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) += l.bias.row(0);
  return out;
}

Matrix oracle_norm(const lsr1::Norm<Matrix>& nrm, const Matrix& x, const lsr1::ModelConfig& cfg) {
  if (!cfg.normalize) return x;
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    double mean = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) mean += x(r, c);
    mean /= static_cast<double>(x.rows());
    double var = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      out(r, c) = (x(r, c) - mean) / std::sqrt(var + cfg.norm_eps) * nrm.scale(0, c) + nrm.shift(0, c);
  }
  return out;
}

Matrix oracle_prelu(const Matrix& x, const Matrix& slope) {
  return x.unaryExpr([&](double v) { return v >= 0 ? v : slope(0, 0) * v; });
}

Matrix oracle_mlp(const lsr1::Mlp<Matrix>& m, const Matrix& x, const lsr1::ModelConfig& cfg) {
  Matrix h = oracle_prelu(oracle_norm(m.bn1, oracle_linear(m.fc1, x), cfg), m.prelu);
  for (const auto& b : m.blocks) {
    Matrix t = oracle_prelu(oracle_norm(b.bn1, oracle_linear(b.fc1, h), cfg), b.prelu);
    t = oracle_norm(b.bn2, oracle_linear(b.fc2, t), cfg);
    h = h + t;
  }
  return oracle_linear(m.fc2, h);
}

struct OracleStep {
  Vector x, g, p, q, d, v, alpha;
};

// First iteration written out directly: features (x0, x0, g0, g0, g0), one
// vector in the buffer, identity on (buffer not full for L > 1).
OracleStep oracle_first_step(const lsr1::LsrOneModel& model, const lsr1::QuadraticObjective& obj, const Vector& x0,
                             double gamma1, double gamma2) {
  const Vector g0 = obj.h() * x0 + obj.b();
  Matrix f(x0.size(), 5);
  f << x0, x0, g0, g0, g0;
  const Matrix latent = oracle_mlp(model.params.encoder, f, model.config);
  OracleStep s;
  s.v = oracle_mlp(model.params.vector_gen, latent, model.config).col(0);
  const Vector logits = oracle_mlp(model.params.lr_gen, latent, model.config).col(0);
  s.alpha = logits.unaryExpr([&](double a) { return gamma1 * std::exp(gamma2 * a); });
  s.d = g0 + s.v * s.v.dot(g0);
  s.x = x0 - s.alpha.cwiseProduct(s.d);
  s.g = obj.h() * s.x + obj.b();
  s.p = s.x - x0;
  s.q = s.g - g0;
  return s;
}

lsr1::LsrOneModel small_model(std::uint64_t seed, bool normalize = true) {
  lsr1::ModelConfig cfg;
  cfg.hidden = 12;
  cfg.seed = seed;
  cfg.normalize = normalize;
  return lsr1::init_model(cfg);
}

std::shared_ptr<lsr1::QuadraticObjective> random_quadratic(Eigen::Index n, std::uint64_t seed) {
  auto rng = lsr1::substream(seed, 0);
  return lsr1::quadratic_random(n, rng, 1000.0);
}

}  // namespace

TEST(Features, FirstIterationAliases) {
  auto q = random_quadratic(3, 1);
  const Vector x0 = vec({1, -1, 0.5});
  const auto s = lsr1::initial_state(*q, x0);
  const Matrix f = lsr1::assemble_features(s, lsr1::FeatureMask::all());
  ASSERT_EQ(f.rows(), 3);
  ASSERT_EQ(f.cols(), 5);
  const Vector g0 = q->gradient(x0);
  EXPECT_EQ(Vector(f.col(0)), x0);
  EXPECT_EQ(Vector(f.col(1)), x0);
  EXPECT_EQ(Vector(f.col(2)), g0);
  EXPECT_EQ(Vector(f.col(3)), g0);
  EXPECT_EQ(Vector(f.col(4)), g0);
}

TEST(Features, MaskSelectsColumnsInOrder) {
  lsr1::PlainState s{vec({1}), vec({4}), vec({2}), vec({5}), vec({3}), 0};
  const Matrix f = lsr1::assemble_features(s, lsr1::FeatureMask::from_names({"g", "x"}));
  ASSERT_EQ(f.cols(), 2);
  EXPECT_EQ(f(0, 0), 1.0);
  EXPECT_EQ(f(0, 1), 4.0);
  ad::Tape t;
  lsr1::TapeState ts{t.constant(s.x), t.constant(s.g), t.constant(s.p), t.constant(s.q), t.constant(s.d), 0};
  EXPECT_EQ(lsr1::assemble_features(ts, lsr1::FeatureMask::all()).value(),
            lsr1::assemble_features(s, lsr1::FeatureMask::all()));
}

TEST(Preconditioner, ProjectionOntoBasisVector) {
  lsr1::VectorBuffer<Vector> buf(4);
  buf.push(vec({1, 0}));
  EXPECT_EQ(lsr1::apply_preconditioner(buf, vec({2, 3}), false), vec({2, 0}));
}

TEST(Preconditioner, EmptyBufferIdentity) {
  lsr1::VectorBuffer<Vector> buf(4);
  EXPECT_EQ(lsr1::apply_preconditioner(buf, vec({2, 3}), true), vec({2, 3}));
  EXPECT_THROW(lsr1::apply_preconditioner(buf, vec({2, 3}), false), std::invalid_argument);
}

TEST(Preconditioner, TwoVectorsWithIdentity) {
  lsr1::VectorBuffer<Vector> buf(4);
  buf.push(vec({1, 1}));
  buf.push(vec({1, -1}));
  const Vector g = vec({1, 0});
  Matrix B = Matrix::Identity(2, 2) + vec({1, 1}) * vec({1, 1}).transpose() + vec({1, -1}) * vec({1, -1}).transpose();
  EXPECT_EQ(B * g, vec({3, 0}));
  EXPECT_EQ(lsr1::apply_preconditioner(buf, g, true), vec({3, 0}));
}

TEST(Preconditioner, IdentityDropsOnceBufferIsFull) {
  lsr1::VectorBuffer<Vector> buf(2);
  buf.push(vec({1, 0}));
  EXPECT_EQ(lsr1::apply_preconditioner(buf, vec({2, 3}), true), vec({4, 3}));
  buf.push(vec({0, 1}));
  EXPECT_EQ(lsr1::apply_preconditioner(buf, vec({2, 3}), true), vec({2, 3}));
}

TEST(Preconditioner, MatchesDenseOperatorOnRandomBuffers) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 16);
  std::uniform_int_distribution<int> cap(1, 8);
  std::bernoulli_distribution coin(0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = dim(rng);
    const int l = cap(rng);
    const int pushes = std::uniform_int_distribution<int>(1, 2 * l)(rng);
    const bool identity = coin(rng);
    lsr1::VectorBuffer<Vector> buf(l);
    for (int i = 0; i < pushes; ++i) buf.push(random_vector(n, rng));
    const Vector g = random_vector(n, rng);
    Matrix B = identity && !buf.full() ? Matrix(Matrix::Identity(n, n)) : Matrix(Matrix::Zero(n, n));
    for (const Vector& v : buf) B += v * v.transpose();
    const Vector d = lsr1::apply_preconditioner(buf, g, identity);
    worst = std::max(worst, (d - B * g).cwiseAbs().maxCoeff() / std::max(1.0, (B * g).cwiseAbs().maxCoeff()));
    // Quadratic form: PSD always, bounded below by |g|^2 while the identity is active.
    const double form = g.dot(d);
    EXPECT_GE(form, -1e-12);
    if (identity && !buf.full()) EXPECT_GE(form, g.squaredNorm() * (1 - 1e-12));
    // Tape version is the same operator.
    ad::Tape t;
    lsr1::VectorBuffer<ad::Var> tb(l);
    for (const Vector& v : buf) tb.push(t.constant(v));
    EXPECT_LT((lsr1::apply_preconditioner(tb, t.constant(g), identity).value() - d).cwiseAbs().maxCoeff(), 1e-13);
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Buffer, FifoEviction) {
  const int L = 5;
  for (int m = 0; m < 7; ++m) {
    lsr1::VectorBuffer<int> buf(L);
    for (int i = 1; i <= L + m; ++i) buf.push(i);
    ASSERT_EQ(buf.size(), static_cast<std::size_t>(L));
    for (int j = 0; j < L; ++j) EXPECT_EQ(buf[static_cast<std::size_t>(j)], m + 1 + j);
  }
  EXPECT_THROW(lsr1::VectorBuffer<int>(0), std::invalid_argument);
}

TEST(SecantResidual, IdentityWithEqualPair) {
  lsr1::VectorBuffer<Vector> buf(3);
  EXPECT_EQ(lsr1::secant_residual(buf, vec({1, 2}), vec({1, 2}), true), 0.0);
}

TEST(SecantResidual, HandSolvedRankOne) {
  // (I + v v^T) q = p with q = (1, 0), v = sqrt(c) e1, c = 1 -> p = (2, 0).
  lsr1::VectorBuffer<Vector> buf(3);
  buf.push(vec({1, 0}));
  EXPECT_EQ(lsr1::secant_residual(buf, vec({2, 0}), vec({1, 0}), true), 0.0);
  EXPECT_EQ(lsr1::secant_residual(buf, vec({3, 0}), vec({1, 0}), true), 1.0);
  ad::Tape t;
  lsr1::VectorBuffer<ad::Var> tb(3);
  tb.push(t.constant(vec({1, 0})));
  EXPECT_EQ(lsr1::secant_residual(tb, t.constant(vec({3, 0})), t.constant(vec({1, 0})), true).scalar(), 1.0);
}

TEST(Step, IdentityQuadraticStepIsScaledDirection) {
  const auto model = small_model(4);
  lsr1::LsrOneConfig cfg;
  lsr1::QuadraticObjective q(Matrix::Identity(3, 3), Vector::Zero(3));
  ad::Tape t;
  auto bound = lsr1::bind(t, model, false);
  auto state = lsr1::initial_state(t, q, vec({1, 2, -1}));
  lsr1::VectorBuffer<ad::Var> buf(cfg.buffer);
  for (int k = 1; k <= 3; ++k) {
    auto r = lsr1::step(state, buf, bound, q, cfg);
    EXPECT_EQ(state.k, k);
    EXPECT_LT((state.p.value() + r.alpha.value().cwiseProduct(r.d.value())).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Step, QuadraticGradientDifferenceIsHessianTimesStep) {
  const auto model = small_model(5);
  lsr1::LsrOneConfig cfg;
  auto q = random_quadratic(4, 7);
  ad::Tape t;
  auto bound = lsr1::bind(t, model, false);
  auto state = lsr1::initial_state(t, *q, vec({1, 0, -1, 2}));
  lsr1::VectorBuffer<ad::Var> buf(cfg.buffer);
  for (int k = 1; k <= 4; ++k) {
    lsr1::step(state, buf, bound, *q, cfg);
    EXPECT_LT((state.q.value() - q->h() * state.p.value()).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Step, MatchesStraightLineOracle) {
  for (bool normalize : {true, false}) {
    const auto model = small_model(6, normalize);
    lsr1::LsrOneConfig cfg;
    cfg.gamma1 = 0.4;
    cfg.gamma2 = 0.5;
    auto q = random_quadratic(5, 8);
    const Vector x0 = vec({0.3, -1.2, 0.7, 1.9, -0.4});
    const OracleStep o = oracle_first_step(model, *q, x0, cfg.gamma1, cfg.gamma2);

    ad::Tape t;
    auto bound = lsr1::bind(t, model, false);
    auto state = lsr1::initial_state(t, *q, x0);
    lsr1::VectorBuffer<ad::Var> buf(cfg.buffer);
    auto r = lsr1::step(state, buf, bound, *q, cfg);
    EXPECT_LT((state.x.value() - o.x).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((r.v.value() - o.v).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((r.alpha.value() - o.alpha).cwiseAbs().maxCoeff(), 1e-12);
    const double residual = (o.p - (o.q + o.v * o.v.dot(o.q))).squaredNorm();
    EXPECT_NEAR(r.residual.scalar(), residual, 1e-12 * std::max(1.0, residual));
    EXPECT_NEAR(r.value.scalar(), q->value(o.x), 1e-12);
  }
}

TEST(Step, FeatureMaskMustMatchModel) {
  const auto model = small_model(1);
  lsr1::LsrOneConfig cfg;
  cfg.features = lsr1::FeatureMask::from_names({"x", "g"});
  auto q = random_quadratic(2, 1);
  ad::Tape t;
  auto bound = lsr1::bind(t, model, false);
  auto state = lsr1::initial_state(t, *q, vec({1, 1}));
  lsr1::VectorBuffer<ad::Var> buf(cfg.buffer);
  EXPECT_THROW(lsr1::step(state, buf, bound, *q, cfg), std::invalid_argument);
}

TEST(Step, NonFiniteIterateReportsIteration) {
  const auto model = small_model(2);
  lsr1::LsrOneConfig cfg;
  cfg.gamma1 = 1e150;
  lsr1::RosenbrockObjective rosen(3);
  try {
    (void)lsr1::run(rosen, vec({1.5, -1.5, 2}), model, cfg, 10);
    FAIL() << "expected IterationError";
  } catch (const lsr1::IterationError& e) {
    EXPECT_GE(e.iteration(), 1);
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
  }
}

TEST(Run, RejectsEmptyBudget) {
  auto q = random_quadratic(2, 3);
  EXPECT_THROW(lsr1::run(*q, vec({1, 1}), small_model(1), {}, 0), std::invalid_argument);
}

TEST(Run, TrajectoryShapeAndDeterminism) {
  auto q = random_quadratic(6, 9);
  const auto model = small_model(3);
  const Vector x0 = Vector::Constant(6, 0.5);
  const auto a = lsr1::run(*q, x0, model, {}, 12);
  const auto b = lsr1::run(*q, x0, model, {}, 12);
  ASSERT_EQ(a.rows.size(), 12u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].k, static_cast<int>(i) + 1);
    EXPECT_EQ(a.rows[i].x, b.rows[i].x);
    EXPECT_GT(a.rows[i].alpha_min, 0.0);
    EXPECT_LE(a.rows[i].alpha_min, a.rows[i].alpha_max);
  }
  EXPECT_EQ(a.initial_value, q->value(x0));
  std::ostringstream sa, sb;
  lsr1::write_trajectory_csv(sa, a);
  lsr1::write_trajectory_csv(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str().substr(0, sa.str().find('\n')), "k,f,grad_norm,d_norm,alpha_min,alpha_max,secant_residual");
}

TEST(Run, MatchesSingleTapeUnroll) {
  auto q = random_quadratic(4, 10);
  const auto model = small_model(7);
  lsr1::LsrOneConfig cfg;
  cfg.buffer = 3;
  const Vector x0 = vec({1, -2, 0.5, 0.1});
  const auto traj = lsr1::run(*q, x0, model, cfg, 7);
  ad::Tape t;
  auto bound = lsr1::bind(t, model, true);
  auto state = lsr1::initial_state(t, *q, x0);
  lsr1::VectorBuffer<ad::Var> buf(cfg.buffer);
  for (int k = 0; k < 7; ++k) {
    auto r = lsr1::step(state, buf, bound, *q, cfg);
    EXPECT_EQ(state.x.value(), traj.rows[static_cast<std::size_t>(k)].x);
    EXPECT_EQ(r.residual.scalar(), traj.rows[static_cast<std::size_t>(k)].secant_residual);
  }
}

TEST(Run, WorksAcrossDimensions) {
  const auto model = small_model(8);
  for (Eigen::Index n : {1, 3, 50}) {
    lsr1::RastriginObjective r(n);
    const auto traj = lsr1::run(r, Vector::Constant(n, 0.3), model, {}, 3);
    EXPECT_EQ(traj.final_point().size(), n);
  }
}

TEST(Config, Validation) {
  lsr1::LsrOneConfig cfg;
  cfg.buffer = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.buffer = 1;
  cfg.gamma2 = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
