// The three learnable element-wise modules of L-SR1: an input encoder, a
// vector generator and a learning-rate generator. Each is the same MLP
// (fc -> norm -> PReLU -> dropout -> two residual basic blocks -> fc) applied
// independently to every coordinate row, so one model serves any dimension.
//
// Parameter containers are templated on the storage type: Matrix for the
// owned parameters, ad::Var once bound to a tape.
#pragma once

#include "lsr1/autodiff.hpp"
#include "lsr1/random.hpp"

#include <Eigen/Dense>

#include <array>
#include <bitset>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lsr1 {

/// Encoder input channels, in their fixed column order.
enum class Feature : unsigned { x = 0, p = 1, d = 2, g = 3, q = 4 };

inline constexpr std::array<std::string_view, 5> kFeatureNames = {"x", "p", "d", "g", "q"};

class FeatureMask {
 public:
  FeatureMask() : bits_(0b11111) {}
  explicit FeatureMask(std::bitset<5> bits) : bits_(bits) {
    if (bits_.none()) throw std::invalid_argument("feature mask must enable at least one channel");
  }

  static FeatureMask all() { return FeatureMask(); }

  static FeatureMask from_names(const std::vector<std::string>& names) {
    std::bitset<5> bits;
    for (const std::string& n : names) {
      bool found = false;
      for (std::size_t i = 0; i < kFeatureNames.size(); ++i) {
        if (kFeatureNames[i] == n) {
          bits.set(i);
          found = true;
        }
      }
      if (!found) throw std::invalid_argument("unknown feature channel '" + n + "' (expected x, p, d, g, q)");
    }
    return FeatureMask(bits);
  }

  [[nodiscard]] bool contains(Feature f) const { return bits_.test(static_cast<unsigned>(f)); }
  [[nodiscard]] int count() const { return static_cast<int>(bits_.count()); }
  [[nodiscard]] unsigned long bits() const { return bits_.to_ulong(); }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < kFeatureNames.size(); ++i)
      if (bits_.test(i)) out.emplace_back(kFeatureNames[i]);
    return out;
  }

  friend bool operator==(const FeatureMask& a, const FeatureMask& b) { return a.bits_ == b.bits_; }

 private:
  std::bitset<5> bits_;
};

struct ModelConfig {
  int hidden = 128;
  FeatureMask features;
  // Per-call normalization over the coordinate axis; off gives strict row independence.
  bool normalize = true;
  double norm_eps = 1e-5;
  double dropout = 0.0;
  double gamma1 = 0.4;
  double gamma2 = 0.001;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct Linear {
  T weight;  // (out, in)
  T bias;    // (1, out)
};

template <class T>
struct Norm {
  T scale;  // (1, width)
  T shift;  // (1, width)
};

template <class T>
struct BasicBlock {
  Linear<T> fc1;
  Norm<T> bn1;
  T prelu;
  Linear<T> fc2;
  Norm<T> bn2;
};

template <class T>
struct Mlp {
  Linear<T> fc1;
  Norm<T> bn1;
  T prelu;
  std::array<BasicBlock<T>, 2> blocks;
  Linear<T> fc2;
};

template <class T>
struct ModelParams {
  Mlp<T> encoder;
  Mlp<T> vector_gen;
  Mlp<T> lr_gen;
};

namespace detail {

template <class L, class F>
void visit_linear(L& l, const std::string& prefix, F& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}

template <class N, class F>
void visit_norm(N& n, const std::string& prefix, F& f) {
  f(prefix + ".scale", n.scale);
  f(prefix + ".shift", n.shift);
}

template <class M, class F>
void visit_mlp(M& m, const std::string& prefix, F& f) {
  visit_linear(m.fc1, prefix + ".fc1", f);
  visit_norm(m.bn1, prefix + ".bn1", f);
  f(prefix + ".prelu", m.prelu);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = prefix + ".block" + std::to_string(i + 1);
    visit_linear(b.fc1, p + ".fc1", f);
    visit_norm(b.bn1, p + ".bn1", f);
    f(p + ".prelu", b.prelu);
    visit_linear(b.fc2, p + ".fc2", f);
    visit_norm(b.bn2, p + ".bn2", f);
  }
  visit_linear(m.fc2, prefix + ".fc2", f);
}

}  // namespace detail

/// Calls f(name, tensor) for every parameter in a fixed order.
template <class P, class F>
void visit_params(P& params, F&& f) {
  detail::visit_mlp(params.encoder, "encoder", f);
  detail::visit_mlp(params.vector_gen, "vector_gen", f);
  detail::visit_mlp(params.lr_gen, "lr_gen", f);
}

struct LsrOneModel {
  ModelConfig config;
  ModelParams<Matrix> params;

  [[nodiscard]] std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    visit_params(params, [&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
  }
  [[nodiscard]] std::vector<const Matrix*> tensors() const {
    std::vector<const Matrix*> out;
    visit_params(params, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
    return out;
  }
};

struct TensorShape {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

namespace detail {

inline void mlp_shapes(int in, int hidden, int out, const std::string& prefix, std::vector<TensorShape>& shapes) {
  auto linear = [&](const std::string& p, int fan_in, int fan_out) {
    shapes.push_back({p + ".weight", fan_out, fan_in});
    shapes.push_back({p + ".bias", 1, fan_out});
  };
  auto norm = [&](const std::string& p) {
    shapes.push_back({p + ".scale", 1, hidden});
    shapes.push_back({p + ".shift", 1, hidden});
  };
  linear(prefix + ".fc1", in, hidden);
  norm(prefix + ".bn1");
  shapes.push_back({prefix + ".prelu", 1, 1});
  for (int i = 1; i <= 2; ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    linear(p + ".fc1", hidden, hidden);
    norm(p + ".bn1");
    shapes.push_back({p + ".prelu", 1, 1});
    linear(p + ".fc2", hidden, hidden);
    norm(p + ".bn2");
  }
  linear(prefix + ".fc2", hidden, out);
}

}  // namespace detail

/// Tensor manifest implied by a configuration, in visitation order.
inline std::vector<TensorShape> expected_shapes(const ModelConfig& cfg) {
  std::vector<TensorShape> shapes;
  detail::mlp_shapes(cfg.features.count(), cfg.hidden, cfg.hidden, "encoder", shapes);
  detail::mlp_shapes(cfg.hidden, cfg.hidden, 1, "vector_gen", shapes);
  detail::mlp_shapes(cfg.hidden, cfg.hidden, 1, "lr_gen", shapes);
  return shapes;
}

inline std::size_t count_parameters(const LsrOneModel& model) {
  std::size_t n = 0;
  visit_params(model.params, [&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); PReLU slope 0.25;
/// normalization affine (1, 0).
inline LsrOneModel init_model(const ModelConfig& cfg) {
  if (cfg.hidden < 1) throw std::invalid_argument("init_model: hidden width must be positive");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw std::invalid_argument("init_model: dropout must be in [0, 1)");
  if (!(cfg.gamma1 > 0.0) || !(cfg.gamma2 > 0.0)) throw std::invalid_argument("init_model: gamma1, gamma2 must be > 0");

  LsrOneModel model;
  model.config = cfg;
  const std::vector<TensorShape> shapes = expected_shapes(cfg);
  Rng rng = seeded_rng({cfg.seed, 0x1a7e1ULL});

  std::size_t i = 0;
  double bound = 1.0;
  visit_params(model.params, [&](const std::string& name, Matrix& m) {
    const TensorShape& s = shapes[i++];
    m.resize(s.rows, s.cols);
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".weight")) {
      bound = 1.0 / std::sqrt(static_cast<double>(s.cols));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = u(rng);
    } else if (ends_with(".bias")) {
      // Shares the fan-in bound of the weight visited just before it.
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = u(rng);
    } else if (ends_with(".prelu")) {
      m.setConstant(0.25);
    } else if (ends_with(".scale")) {
      m.setOnes();
    } else {
      m.setZero();
    }
  });
  return model;
}

/// Model parameters living on a tape.
struct BoundModel {
  const ModelConfig* config = nullptr;
  ModelParams<ad::Var> params;
  std::vector<ad::Var> leaves;  // visitation order
};

inline BoundModel bind(ad::Tape& tape, const LsrOneModel& model, bool requires_grad) {
  BoundModel out;
  out.config = &model.config;
  visit_params(model.params,
               [&](const std::string&, const Matrix& m) { out.leaves.push_back(tape.leaf(m, requires_grad)); });
  std::size_t i = 0;
  visit_params(out.params, [&](const std::string&, ad::Var& v) { v = out.leaves[i++]; });
  return out;
}

namespace detail {

inline ad::Var apply_linear(const Linear<ad::Var>& l, const ad::Var& x) {
  return ad::add_rowvec(ad::matmul_nt(x, l.weight), l.bias);
}

inline ad::Var apply_norm(const Norm<ad::Var>& n, const ad::Var& x, const ModelConfig& cfg) {
  return cfg.normalize ? ad::batch_norm(x, n.scale, n.shift, cfg.norm_eps) : x;
}

inline ad::Var apply_block(const BasicBlock<ad::Var>& b, const ad::Var& x, const ModelConfig& cfg, Rng* rng) {
  ad::Var h = ad::prelu(apply_norm(b.bn1, apply_linear(b.fc1, x), cfg), b.prelu);
  h = ad::dropout(h, cfg.dropout, rng);
  h = apply_norm(b.bn2, apply_linear(b.fc2, h), cfg);
  h = ad::dropout(h, cfg.dropout, rng);
  return x + h;
}

inline ad::Var apply_mlp(const Mlp<ad::Var>& m, const ad::Var& x, const ModelConfig& cfg, Rng* rng) {
  ad::Var h = ad::prelu(apply_norm(m.bn1, apply_linear(m.fc1, x), cfg), m.prelu);
  h = ad::dropout(h, cfg.dropout, rng);
  for (const auto& b : m.blocks) h = apply_block(b, h, cfg, rng);
  return apply_linear(m.fc2, h);
}

}  // namespace detail

/// (N, C) features -> (N, hidden) latent. `rng` enables dropout when the rate is nonzero.
inline ad::Var encode(const BoundModel& model, const ad::Var& features, Rng* rng = nullptr) {
  const ModelConfig& cfg = *model.config;
  if (features.cols() != cfg.features.count()) {
    throw ad::ShapeError("encode: expected " + std::to_string(cfg.features.count()) + " feature channels, got " +
                         std::to_string(features.cols()));
  }
  return detail::apply_mlp(model.params.encoder, features, cfg, rng);
}

/// (N, hidden) latent -> (N, 1) vector v_k.
inline ad::Var generate_vector(const BoundModel& model, const ad::Var& latent, Rng* rng = nullptr) {
  return detail::apply_mlp(model.params.vector_gen, latent, *model.config, rng);
}

/// alpha = gamma1 * exp(gamma2 * logits), element-wise.
inline ad::Var lr_from_logits(const ad::Var& logits, double gamma1, double gamma2) {
  return gamma1 * ad::exp(gamma2 * logits);
}

/// Raw log-rate output of the learning-rate generator.
inline ad::Var lr_logits(const BoundModel& model, const ad::Var& latent, Rng* rng = nullptr) {
  return detail::apply_mlp(model.params.lr_gen, latent, *model.config, rng);
}

/// (N, hidden) latent -> strictly positive (N, 1) per-coordinate step sizes.
inline ad::Var generate_lr(const BoundModel& model, const ad::Var& latent, double gamma1, double gamma2,
                           Rng* rng = nullptr) {
  return lr_from_logits(lr_logits(model, latent, rng), gamma1, gamma2);
}

inline ad::Var generate_lr(const BoundModel& model, const ad::Var& latent, Rng* rng = nullptr) {
  return generate_lr(model, latent, model.config->gamma1, model.config->gamma2, rng);
}

}  // namespace lsr1
