// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation eagerly (forward values are computed on
// the spot) together with a backward rule. Vectors are N x 1 matrices and
// scalars are 1 x 1 matrices. The only implicit broadcast is scalar with
// array; everything else (bias rows, slicing, padding) is an explicit op.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lsr1::ad {

using Matrix = Eigen::MatrixXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "(" + std::to_string(rows) + ", " + std::to_string(cols) + ")";
}

inline std::string shape_string(const Matrix& m) { return shape_string(m.rows(), m.cols()); }

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
  [[nodiscard]] Tape& tape() const;
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] bool requires_grad() const;
  /// Value of a 1 x 1 node.
  [[nodiscard]] double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoints of the requires_grad leaves after a backward sweep.
class Gradients {
 public:
  [[nodiscard]] bool empty() const noexcept { return grads_.empty(); }
  [[nodiscard]] std::size_t size() const noexcept { return grads_.size(); }
  [[nodiscard]] bool contains(const Var& v) const { return grads_.count(v.id()) != 0; }

  const Matrix& operator[](const Var& v) const {
    auto it = grads_.find(v.id());
    if (it == grads_.end()) {
      throw std::out_of_range("gradient requested for a node that is not a requires_grad leaf");
    }
    return it->second;
  }

 private:
  friend class Tape;
  std::map<std::size_t, Matrix> grads_;
};

class Tape {
 public:
  /// Receives the tape and the adjoint of the node being propagated.
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  template <class Derived>
  Var leaf(const Eigen::MatrixBase<Derived>& values, bool requires_grad = false) {
    return leaf(Matrix(values), requires_grad);
  }

  Var leaf(Matrix&& values, bool requires_grad = false) {
    if (!values.allFinite()) {
      throw NumericError("leaf: non-finite input values");
    }
    nodes_.push_back(Node{std::move(values), Matrix(), nullptr, "leaf", requires_grad, true, false});
    return Var(this, nodes_.size() - 1);
  }

  Var leaf(const Matrix& values, bool requires_grad = false) { return leaf(Matrix(values), requires_grad); }

  template <class Derived>
  Var constant(const Eigen::MatrixBase<Derived>& values) {
    return leaf(Matrix(values), false);
  }

  Var scalar(double value, bool requires_grad = false) {
    return leaf(Matrix::Constant(1, 1, value), requires_grad);
  }

  /// Appends an interior node. The backward rule is dropped when no input
  /// needs a gradient, so inference-only tapes store values alone.
  Var record(const char* op, Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Var record(const char* op, Matrix value, std::span<const Var> inputs, Backward backward) {
    bool needs_grad = false;
    for (const Var& in : inputs) {
      check_owner(in, op);
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    if (!value.allFinite()) {
      throw NumericError(std::string(op) + ": non-finite result");
    }
    nodes_.push_back(
        Node{std::move(value), Matrix(), needs_grad ? std::move(backward) : nullptr, op, needs_grad, false, false});
    return Var(this, nodes_.size() - 1);
  }

  /// Reverse sweep from a 1 x 1 root. Adjoints from earlier sweeps are reset.
  Gradients backward(const Var& root) {
    check_owner(root, "backward");
    const Matrix& rv = nodes_[root.id()].value;
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward: root must be scalar, got " + shape_string(rv));
    }
    for (Node& n : nodes_) {
      n.has_adjoint = false;
      n.adjoint.resize(0, 0);
    }
    Node& r = nodes_[root.id()];
    if (r.requires_grad) {
      r.adjoint = Matrix::Ones(1, 1);
      r.has_adjoint = true;
    }
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_adjoint || !n.backward) continue;
      n.backward(*this, n.adjoint);
    }
    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.leaf || !n.requires_grad) continue;
      out.grads_.emplace(i, n.has_adjoint ? n.adjoint : Matrix::Zero(n.value.rows(), n.value.cols()));
    }
    return out;
  }

  template <class Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.has_adjoint) {
      n.adjoint.noalias() += delta;
    } else {
      n.adjoint = delta;
      n.has_adjoint = true;
    }
  }

  [[nodiscard]] const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] const char* op_name(std::size_t id) const { return nodes_[id].op; }
  [[nodiscard]] bool has_adjoint(std::size_t id) const { return nodes_[id].has_adjoint; }
  [[nodiscard]] const Matrix& adjoint(std::size_t id) const { return nodes_[id].adjoint; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Drops every node recorded after the first `count`; handles to them become invalid.
  void truncate(std::size_t count) {
    if (count > nodes_.size()) throw std::out_of_range("truncate: tape has fewer nodes");
    nodes_.resize(count);
  }

  void check_owner(const Var& v, const char* op) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) {
      throw std::invalid_argument(std::string(op) + ": operand belongs to a different tape");
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix adjoint;
    Backward backward;
    const char* op;
    bool requires_grad;
    bool leaf;
    bool has_adjoint;
  };

  std::vector<Node> nodes_;
};

inline Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("Var: unbound handle");
  return *tape_;
}
inline const Matrix& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }
inline double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): node has shape " + shape_string(v));
  return v(0, 0);
}

namespace detail {

inline Tape& same_tape(const char* op, const Var& a, const Var& b) {
  Tape& t = a.tape();
  t.check_owner(b, op);
  return t;
}

inline bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

// Products with only a handful of rows are faster coefficient-wise than through
// the blocked GEMM path, whose packing cost dominates at that size.
inline bool few_rows(const Matrix& m) { return m.rows() <= 8; }

inline Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return Matrix::Constant(rows, cols, m(0, 0));
}

// Reduces an adjoint of the broadcast shape back to the operand shape.
inline void accumulate_reduced(Tape& t, std::size_t id, const Matrix& grad) {
  const Matrix& v = t.value(id);
  if (v.rows() == grad.rows() && v.cols() == grad.cols()) {
    t.accumulate(id, grad);
  } else {
    t.accumulate(id, Matrix::Constant(1, 1, grad.sum()));
  }
}

inline std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return {a.rows(), a.cols()};
  if (is_scalar(a)) return {b.rows(), b.cols()};
  if (is_scalar(b)) return {a.rows(), a.cols()};
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// fwd(A, B) -> Matrix on expanded operands; grad(A, B, adj) -> {dA, dB} at full shape.
template <class Fwd, class Grad>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, Grad grad) {
  Tape& t = same_tape(op, a, b);
  auto [rows, cols] = broadcast_shape(op, a.value(), b.value());
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  Matrix out = same ? fwd(a.value(), b.value()) : fwd(expand(a.value(), rows, cols), expand(b.value(), rows, cols));
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return t.record(op, std::move(out), {a, b}, [ia, ib, rows, cols, same, grad](Tape& tape, const Matrix& adj) {
    auto [dA, dB] = same ? grad(tape.value(ia), tape.value(ib), adj)
                         : grad(expand(tape.value(ia), rows, cols), expand(tape.value(ib), rows, cols), adj);
    if (tape.requires_grad(ia)) accumulate_reduced(tape, ia, dA);
    if (tape.requires_grad(ib)) accumulate_reduced(tape, ib, dB);
  });
}

template <class Fwd, class Deriv>
Var elementwise(const char* op, const Var& x, Fwd fwd, Deriv deriv) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  return t.record(op, fwd(x.value()), {x}, [ix, deriv](Tape& tape, const Matrix& adj) {
    const Matrix& X = tape.value(ix);
    tape.accumulate(ix, adj.cwiseProduct(deriv(X)));
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      "add", a, b, [](const Matrix& A, const Matrix& B) -> Matrix { return A + B; },
      [](const Matrix&, const Matrix&, const Matrix& adj) { return std::pair<Matrix, Matrix>{adj, adj}; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      "sub", a, b, [](const Matrix& A, const Matrix& B) -> Matrix { return A - B; },
      [](const Matrix&, const Matrix&, const Matrix& adj) { return std::pair<Matrix, Matrix>{adj, -adj}; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      "mul", a, b, [](const Matrix& A, const Matrix& B) -> Matrix { return A.cwiseProduct(B); },
      [](const Matrix& A, const Matrix& B, const Matrix& adj) {
        return std::pair<Matrix, Matrix>{adj.cwiseProduct(B), adj.cwiseProduct(A)};
      });
}

inline Var div(const Var& a, const Var& b) {
  if ((b.value().array() == 0.0).any()) {
    throw NumericError("div: division by zero");
  }
  return detail::binary(
      "div", a, b, [](const Matrix& A, const Matrix& B) -> Matrix { return A.cwiseQuotient(B); },
      [](const Matrix& A, const Matrix& B, const Matrix& adj) {
        Matrix dA = adj.cwiseQuotient(B);
        Matrix dB = -adj.cwiseProduct(A).cwiseQuotient(B.cwiseProduct(B));
        return std::pair<Matrix, Matrix>{std::move(dA), std::move(dB)};
      });
}

inline Var neg(const Var& x) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  return t.record("neg", -x.value(), {x}, [ix](Tape& tape, const Matrix& adj) { tape.accumulate(ix, -adj); });
}

inline Var scale(const Var& x, double c) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  return t.record("scale", c * x.value(), {x}, [ix, c](Tape& tape, const Matrix& adj) { tape.accumulate(ix, c * adj); });
}

inline Var add_scalar(const Var& x, double c) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  Matrix out = x.value().array() + c;
  return t.record("add_scalar", std::move(out), {x}, [ix](Tape& tape, const Matrix& adj) { tape.accumulate(ix, adj); });
}

inline Var exp(const Var& x) {
  return detail::elementwise(
      "exp", x, [](const Matrix& X) -> Matrix { return X.array().exp().matrix(); },
      [](const Matrix& X) -> Matrix { return X.array().exp().matrix(); });
}

inline Var ln(const Var& x) {
  if ((x.value().array() <= 0.0).any()) {
    throw NumericError("ln: argument must be strictly positive");
  }
  return detail::elementwise(
      "ln", x, [](const Matrix& X) -> Matrix { return X.array().log().matrix(); },
      [](const Matrix& X) -> Matrix { return X.array().inverse().matrix(); });
}

inline Var pow_scalar(const Var& x, double p) {
  return detail::elementwise(
      "pow_scalar", x, [p](const Matrix& X) -> Matrix { return X.array().pow(p).matrix(); },
      [p](const Matrix& X) -> Matrix {
        if (p == 1.0) return Matrix::Ones(X.rows(), X.cols());
        return (p * X.array().pow(p - 1.0)).matrix();
      });
}

inline Var abs(const Var& x) {
  return detail::elementwise(
      "abs", x, [](const Matrix& X) -> Matrix { return X.cwiseAbs(); },
      [](const Matrix& X) -> Matrix { return X.unaryExpr([](double v) { return double((v > 0) - (v < 0)); }); });
}

inline Var cos(const Var& x) {
  return detail::elementwise(
      "cos", x, [](const Matrix& X) -> Matrix { return X.array().cos().matrix(); },
      [](const Matrix& X) -> Matrix { return (-X.array().sin()).matrix(); });
}

inline Var sin(const Var& x) {
  return detail::elementwise(
      "sin", x, [](const Matrix& X) -> Matrix { return X.array().sin().matrix(); },
      [](const Matrix& X) -> Matrix { return X.array().cos().matrix(); });
}

/// max(x, 0) + slope * min(x, 0) with a learnable 1 x 1 slope.
inline Var prelu(const Var& x, const Var& slope) {
  Tape& t = detail::same_tape("prelu", x, slope);
  if (!detail::is_scalar(slope.value())) {
    throw ShapeError("prelu: slope must be (1, 1), got " + shape_string(slope.value()));
  }
  const double a = slope.scalar();
  Matrix out = x.value().unaryExpr([a](double v) { return v > 0 ? v : a * v; });
  const std::size_t ix = x.id();
  const std::size_t is = slope.id();
  return t.record("prelu", std::move(out), {x, slope}, [ix, is](Tape& tape, const Matrix& adj) {
    const Matrix& X = tape.value(ix);
    const double a = tape.value(is)(0, 0);
    if (tape.requires_grad(ix)) {
      Matrix dx = adj.binaryExpr(X, [a](double g, double v) { return v > 0 ? g : a * g; });
      tape.accumulate(ix, dx);
    }
    if (tape.requires_grad(is)) {
      const double ds = adj.binaryExpr(X, [](double g, double v) { return v > 0 ? 0.0 : g * v; }).sum();
      tape.accumulate(is, Matrix::Constant(1, 1, ds));
    }
  });
}

/// PReLU with a fixed slope.
inline Var prelu(const Var& x, double slope) { return prelu(x, x.tape().scalar(slope)); }

inline Var sum(const Var& x) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  return t.record("sum", Matrix::Constant(1, 1, x.value().sum()), {x}, [ix, r, c](Tape& tape, const Matrix& adj) {
    tape.accumulate(ix, Matrix::Constant(r, c, adj(0, 0)));
  });
}

inline Var mean(const Var& x) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  const double n = static_cast<double>(x.value().size());
  return t.record("mean", Matrix::Constant(1, 1, x.value().mean()), {x}, [ix, r, c, n](Tape& tape, const Matrix& adj) {
    tape.accumulate(ix, Matrix::Constant(r, c, adj(0, 0) / n));
  });
}

inline Var dot(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("dot", a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("dot: shape mismatch " + shape_string(a.value()) + " vs " + shape_string(b.value()));
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  const double v = a.value().cwiseProduct(b.value()).sum();
  return t.record("dot", Matrix::Constant(1, 1, v), {a, b}, [ia, ib](Tape& tape, const Matrix& adj) {
    const double s = adj(0, 0);
    if (tape.requires_grad(ia)) tape.accumulate(ia, s * tape.value(ib));
    if (tape.requires_grad(ib)) tape.accumulate(ib, s * tape.value(ia));
  });
}

inline Var norm_sq(const Var& x) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  return t.record("norm_sq", Matrix::Constant(1, 1, x.value().squaredNorm()), {x},
                  [ix](Tape& tape, const Matrix& adj) { tape.accumulate(ix, (2.0 * adj(0, 0)) * tape.value(ix)); });
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("matmul", a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_string(a.value()) + " vs " + shape_string(b.value()));
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Matrix out = a.value() * b.value();
  return t.record("matmul", std::move(out), {a, b}, [ia, ib](Tape& tape, const Matrix& adj) {
    if (tape.requires_grad(ia)) tape.accumulate(ia, adj * tape.value(ib).transpose());
    if (tape.requires_grad(ib)) tape.accumulate(ib, tape.value(ia).transpose() * adj);
  });
}

/// a * b^T, the shape of a fully connected layer applied to row features.
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("matmul_nt", a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: shape mismatch " + shape_string(a.value()) + " vs " + shape_string(b.value()));
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Matrix out;
  if (detail::few_rows(a.value())) {
    out = a.value().lazyProduct(b.value().transpose());
  } else {
    out = a.value() * b.value().transpose();
  }
  return t.record("matmul_nt", std::move(out), {a, b}, [ia, ib](Tape& tape, const Matrix& adj) {
    const bool few = detail::few_rows(adj);
    if (tape.requires_grad(ia)) {
      if (few) {
        tape.accumulate(ia, adj.lazyProduct(tape.value(ib)));
      } else {
        tape.accumulate(ia, adj * tape.value(ib));
      }
    }
    if (tape.requires_grad(ib)) {
      if (few) {
        tape.accumulate(ib, adj.transpose().lazyProduct(tape.value(ia)));
      } else {
        tape.accumulate(ib, adj.transpose() * tape.value(ia));
      }
    }
  });
}

inline Var matvec(const Var& a, const Var& x) {
  if (x.cols() != 1) {
    throw ShapeError("matvec: right operand must be a column vector, got " + shape_string(x.value()));
  }
  if (a.cols() != x.rows()) {
    throw ShapeError("matvec: shape mismatch " + shape_string(a.value()) + " vs " + shape_string(x.value()));
  }
  return matmul(a, x);
}

inline Var outer(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("outer", a, b);
  if (a.cols() != 1 || b.cols() != 1) {
    throw ShapeError("outer: operands must be column vectors, got " + shape_string(a.value()) + " and " +
                     shape_string(b.value()));
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return t.record("outer", std::move(out), {a, b}, [ia, ib](Tape& tape, const Matrix& adj) {
    if (tape.requires_grad(ia)) tape.accumulate(ia, adj * tape.value(ib));
    if (tape.requires_grad(ib)) tape.accumulate(ib, adj.transpose() * tape.value(ia));
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    t.check_owner(p, "concat_cols");
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts.front().value()) + " vs " +
                       shape_string(p.value()));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  return t.record("concat_cols", std::move(out), parts, [ids, widths](Tape& tape, const Matrix& adj) {
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tape.requires_grad(ids[i])) tape.accumulate(ids[i], adj.middleCols(at, widths[i]));
      at += widths[i];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Adds a (1, m) row to every row of an (n, m) matrix.
inline Var add_rowvec(const Var& x, const Var& row) {
  Tape& t = detail::same_tape("add_rowvec", x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_rowvec: shape mismatch " + shape_string(x.value()) + " vs " + shape_string(row.value()));
  }
  const std::size_t ix = x.id();
  const std::size_t ir = row.id();
  Matrix out = x.value().rowwise() + row.value().row(0);
  return t.record("add_rowvec", std::move(out), {x, row}, [ix, ir](Tape& tape, const Matrix& adj) {
    if (tape.requires_grad(ix)) tape.accumulate(ix, adj);
    if (tape.requires_grad(ir)) tape.accumulate(ir, adj.colwise().sum());
  });
}

inline Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 1 || start + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(x.value()));
  }
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  return t.record("slice_rows", x.value().middleRows(start, count), {x},
                  [ix, r, c, start, count](Tape& tape, const Matrix& adj) {
                    Matrix g = Matrix::Zero(r, c);
                    g.middleRows(start, count) = adj;
                    tape.accumulate(ix, g);
                  });
}

/// Zero rows inserted above and below.
inline Var pad_rows(const Var& x, Eigen::Index before, Eigen::Index after) {
  if (before < 0 || after < 0) throw ShapeError("pad_rows: negative padding");
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  const Eigen::Index r = x.rows();
  Matrix out = Matrix::Zero(r + before + after, x.cols());
  out.middleRows(before, r) = x.value();
  return t.record("pad_rows", std::move(out), {x}, [ix, r, before](Tape& tape, const Matrix& adj) {
    tape.accumulate(ix, adj.middleRows(before, r));
  });
}

/// Per-column normalization over the row axis using this call's statistics,
/// followed by a per-column affine map.
inline Var batch_norm(const Var& x, const Var& scale_row, const Var& shift_row, double eps) {
  Tape& t = detail::same_tape("batch_norm", x, scale_row);
  t.check_owner(shift_row, "batch_norm");
  const Eigen::Index m = x.cols();
  if (scale_row.rows() != 1 || scale_row.cols() != m || shift_row.rows() != 1 || shift_row.cols() != m) {
    throw ShapeError("batch_norm: affine shape mismatch " + shape_string(x.value()) + " vs " +
                     shape_string(scale_row.value()) + " / " + shape_string(shift_row.value()));
  }
  const Matrix& X = x.value();
  const double n = static_cast<double>(X.rows());
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Matrix centered = X.rowwise() - mu;
  const Eigen::RowVectorXd var = centered.cwiseProduct(centered).colwise().sum() / n;
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = centered * inv_std.asDiagonal();
  Matrix out = (xhat * scale_row.value().row(0).asDiagonal()).rowwise() + shift_row.value().row(0);
  const std::size_t ix = x.id();
  const std::size_t ig = scale_row.id();
  const std::size_t ib = shift_row.id();
  return t.record("batch_norm", std::move(out), {x, scale_row, shift_row},
                  [ix, ig, ib, eps, n](Tape& tape, const Matrix& adj) {
                    const Matrix& X = tape.value(ix);
                    const Eigen::RowVectorXd mu = X.colwise().mean();
                    const Matrix centered = X.rowwise() - mu;
                    const Eigen::RowVectorXd var = centered.cwiseProduct(centered).colwise().sum() / n;
                    const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
                    const Matrix xhat = centered * inv_std.asDiagonal();
                    if (tape.requires_grad(ig)) tape.accumulate(ig, adj.cwiseProduct(xhat).colwise().sum());
                    if (tape.requires_grad(ib)) tape.accumulate(ib, adj.colwise().sum());
                    if (tape.requires_grad(ix)) {
                      const Matrix dxhat = adj * tape.value(ig).row(0).asDiagonal();
                      const Eigen::RowVectorXd s1 = dxhat.colwise().sum();
                      const Eigen::RowVectorXd s2 = dxhat.cwiseProduct(xhat).colwise().sum();
                      Matrix dx = (n * dxhat).rowwise() - s1;
                      dx -= xhat * s2.asDiagonal();
                      dx = dx * (inv_std / n).asDiagonal();
                      tape.accumulate(ix, dx);
                    }
                  });
}

/// Inverted dropout. A zero rate records nothing and returns x.
template <class Rng>
Var dropout(const Var& x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask(i) = keep(*rng) ? 1.0 / (1.0 - rate) : 0.0;
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  Matrix out = x.value().cwiseProduct(mask);
  return t.record("dropout", std::move(out), {x},
                  [ix, mask](Tape& tape, const Matrix& adj) { tape.accumulate(ix, adj.cwiseProduct(mask)); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& x) { return neg(x); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator+(const Var& x, double c) { return add_scalar(x, c); }
inline Var operator+(double c, const Var& x) { return add_scalar(x, c); }
inline Var operator-(const Var& x, double c) { return add_scalar(x, -c); }
inline Var operator-(double c, const Var& x) { return add_scalar(neg(x), c); }

/// Scalar function of a list of leaves, rebuilt on a fresh tape per evaluation.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct Coordinate {
  std::size_t leaf = 0;
  Eigen::Index index = 0;
};

struct FiniteDifferenceOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so exact zeros compare absolutely.
  double floor = 1e-8;
  // Empty means every coordinate of every leaf.
  std::vector<Coordinate> coordinates;
};

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  Coordinate worst{};
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares backward() against central differences of f at the given point.
inline FiniteDifferenceReport finite_difference_report(const ScalarFunction& f, std::span<const Matrix> point,
                                                       const FiniteDifferenceOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");

  auto evaluate = [&](const std::vector<Matrix>& at, bool with_grad, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(at.size());
    for (const Matrix& m : at) leaves.push_back(tape.leaf(m, with_grad));
    Var out = f(tape, leaves);
    const double v = out.scalar();
    if (with_grad && grads) {
      Gradients g = tape.backward(out);
      grads->clear();
      for (const Var& l : leaves) grads->push_back(g[l]);
    }
    return v;
  };

  std::vector<Matrix> base(point.begin(), point.end());
  std::vector<Matrix> analytic;
  evaluate(base, true, &analytic);

  std::vector<Coordinate> coords = opts.coordinates;
  if (coords.empty()) {
    for (std::size_t l = 0; l < base.size(); ++l)
      for (Eigen::Index i = 0; i < base[l].size(); ++i) coords.push_back({l, i});
  }

  FiniteDifferenceReport report;
  for (const Coordinate& c : coords) {
    std::vector<Matrix> probe = base;
    const double x0 = base[c.leaf](c.index);
    probe[c.leaf](c.index) = x0 + opts.step;
    const double fp = evaluate(probe, false, nullptr);
    probe[c.leaf](c.index) = x0 - opts.step;
    const double fm = evaluate(probe, false, nullptr);
    const double numeric = (fp - fm) / (2.0 * opts.step);
    const double a = analytic[c.leaf](c.index);
    const double err = relative_error(a, numeric, opts.floor);
    if (err > report.max_relative_error || report.checked == 0) {
      report.max_relative_error = err;
      report.worst = c;
      report.analytic = a;
      report.numeric = numeric;
    }
    ++report.checked;
  }
  return report;
}

inline double finite_difference_check(const ScalarFunction& f, std::span<const Matrix> point, double step) {
  FiniteDifferenceOptions opts;
  opts.step = step;
  return finite_difference_report(f, point, opts).max_relative_error;
}

}  // namespace lsr1::ad

namespace lsr1 {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

}  // namespace lsr1
