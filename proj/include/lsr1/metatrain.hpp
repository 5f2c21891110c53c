// Meta-training: unroll K L-SR1 steps per batch element on its own tape, form
// mean_k [f(x_k) + lambda_sec * ||p_k - B_k q_k||^2], backpropagate, and apply
// one AdamW update per meta-iteration.
#pragma once

#include "lsr1/autodiff.hpp"
#include "lsr1/checkpoint.hpp"
#include "lsr1/csv.hpp"
#include "lsr1/lsr1.hpp"
#include "lsr1/model.hpp"
#include "lsr1/objectives.hpp"
#include "lsr1/parallel.hpp"
#include "lsr1/random.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsr1 {

struct MetaConfig {
  int unroll = 16;
  int batch = 128;
  int iterations = 10000;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
  double secant_weight = 100.0;
  bool detach_secant = false;
  ProblemSpec train_problems{ObjectiveKind::quadratic, 2, std::nullopt, std::nullopt, -2.0, 2.0};
  ProblemSpec validation_problems{ObjectiveKind::quadratic, 2, std::nullopt, 1000.0, -2.0, 2.0};
  int validation_size = 32;
  std::uint64_t train_seed = 1;
  std::uint64_t validation_seed = 2;
  int validate_every = 100;
  // Zero disables periodic checkpoints; the final one is always written.
  int checkpoint_every = 0;
  int jobs = 1;
  LsrOneConfig lsr1;

  void validate() const {
    if (unroll < 1) throw std::invalid_argument("metatrain: unroll K must be >= 1");
    if (batch < 1) throw std::invalid_argument("metatrain: batch size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("metatrain: iterations must be >= 0");
    if (lr < 0.0) throw std::invalid_argument("metatrain: learning rate must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("metatrain: AdamW betas must lie in [0, 1)");
    }
    if (weight_decay < 0.0 || !(eps > 0.0)) throw std::invalid_argument("metatrain: invalid weight decay or epsilon");
    if (secant_weight < 0.0) throw std::invalid_argument("metatrain: secant weight must be >= 0");
    if (validation_size < 1) throw std::invalid_argument("metatrain: validation size must be >= 1");
    if (validate_every < 1) throw std::invalid_argument("metatrain: validate_every must be >= 1");
    if (checkpoint_every < 0) throw std::invalid_argument("metatrain: checkpoint_every must be >= 0");
    lsr1.validate();
  }
};

/// Raised when the batch meta-loss is not finite.
class MetaTrainingError : public std::runtime_error {
 public:
  MetaTrainingError(int iteration, std::uint64_t batch_seed, const std::string& what)
      : std::runtime_error("meta-iteration " + std::to_string(iteration) + " (batch seed " +
                           std::to_string(batch_seed) + "): " + what),
        iteration_(iteration),
        batch_seed_(batch_seed) {}
  [[nodiscard]] int iteration() const noexcept { return iteration_; }
  [[nodiscard]] std::uint64_t batch_seed() const noexcept { return batch_seed_; }

 private:
  int iteration_;
  std::uint64_t batch_seed_;
};

inline double meta_loss(std::span<const double> values, std::span<const double> residuals, double secant_weight) {
  if (values.empty() || values.size() != residuals.size()) {
    throw std::invalid_argument("meta_loss: need K >= 1 matching values and residuals");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) total += values[k] + secant_weight * residuals[k];
  return total / static_cast<double>(values.size());
}

inline ad::Var meta_loss(std::span<const ad::Var> values, std::span<const ad::Var> residuals, double secant_weight) {
  if (values.empty() || values.size() != residuals.size()) {
    throw std::invalid_argument("meta_loss: need K >= 1 matching values and residuals");
  }
  std::optional<ad::Var> total;
  for (std::size_t k = 0; k < values.size(); ++k) {
    ad::Var term = secant_weight == 0.0 ? values[k] : values[k] + secant_weight * residuals[k];
    total = total ? *total + term : term;
  }
  return (1.0 / static_cast<double>(values.size())) * *total;
}

/// Bias-corrected AdamW with decoupled decay: theta -= lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const LsrOneModel& model) {
    for (const Matrix* m : model.tensors()) {
      m_.push_back(Matrix::Zero(m->rows(), m->cols()));
      v_.push_back(Matrix::Zero(m->rows(), m->cols()));
    }
  }

  void update(LsrOneModel& model, const std::vector<Matrix>& grads, double lr, double beta1, double beta2, double eps,
              double weight_decay) {
    std::vector<Matrix*> params = model.tensors();
    if (grads.size() != params.size() || m_.size() != params.size()) {
      throw std::invalid_argument("AdamW: gradient list does not match the parameters");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i];
      if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols()) {
        throw std::invalid_argument("AdamW: gradient shape mismatch at tensor " + std::to_string(i));
      }
      m_[i] = beta1 * m_[i] + (1.0 - beta1) * grads[i];
      v_[i] = beta2 * v_[i] + (1.0 - beta2) * grads[i].cwiseAbs2();
      const Matrix update = (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + eps);
      p -= lr * (update + weight_decay * p);
    }
  }

  [[nodiscard]] std::uint64_t step() const noexcept { return step_; }
  [[nodiscard]] const std::vector<Matrix>& first_moment() const noexcept { return m_; }
  [[nodiscard]] const std::vector<Matrix>& second_moment() const noexcept { return v_; }

  void restore(std::uint64_t step, std::vector<Matrix> m, std::vector<Matrix> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<Matrix> m_, v_;
  std::uint64_t step_ = 0;
};

struct UnrollResult {
  double loss = 0.0;
  double final_value = 0.0;
  double mean_residual = 0.0;
  std::vector<Matrix> grads;  // empty unless requested
};

/// K differentiable steps on one problem; gradients w.r.t. every model tensor when `with_grad`.
inline UnrollResult unroll(const LsrOneModel& model, const Objective& obj, const Vector& x0, const MetaConfig& cfg,
                           bool with_grad, Rng* dropout_rng = nullptr) {
  ad::Tape tape;
  const BoundModel bound = bind(tape, model, with_grad);
  TapeState state = initial_state(tape, obj, x0);
  VectorBuffer<ad::Var> buffer(cfg.lsr1.buffer);
  std::vector<ad::Var> values, residuals;
  for (int k = 0; k < cfg.unroll; ++k) {
    StepResult r = step(state, buffer, bound, obj, cfg.lsr1, dropout_rng, cfg.detach_secant);
    values.push_back(r.value);
    residuals.push_back(r.residual);
  }
  const ad::Var loss = meta_loss(values, residuals, cfg.secant_weight);
  UnrollResult out;
  out.loss = loss.scalar();
  out.final_value = values.back().scalar();
  for (const ad::Var& r : residuals) out.mean_residual += r.scalar();
  out.mean_residual /= static_cast<double>(residuals.size());
  if (with_grad) {
    const ad::Gradients g = tape.backward(loss);
    out.grads.reserve(bound.leaves.size());
    for (const ad::Var& leaf : bound.leaves) out.grads.push_back(g[leaf]);
  }
  return out;
}

/// Batch-mean meta-loss and its gradient. Element gradients are summed in index
/// order, so the result does not depend on the number of jobs.
struct BatchGradient {
  double loss = 0.0;
  std::vector<Matrix> grads;
};

inline BatchGradient batch_gradient(const LsrOneModel& model, const ObjectiveBatch& batch, const MetaConfig& cfg) {
  if (batch.size() == 0) throw std::invalid_argument("meta_step: empty batch");
  std::vector<UnrollResult> results(batch.size());
  const bool dropout = model.config.dropout > 0.0;
  parallel_for(batch.size(), cfg.jobs, [&](std::size_t i) {
    Rng rng = seeded_rng({batch.seed, i, 0xd0d0ULL});
    results[i] = unroll(model, *batch.objectives[i], batch.initial_points[i], cfg, true, dropout ? &rng : nullptr);
  });
  BatchGradient out;
  out.grads = std::move(results[0].grads);
  out.loss = results[0].loss;
  for (std::size_t i = 1; i < results.size(); ++i) {
    out.loss += results[i].loss;
    for (std::size_t t = 0; t < out.grads.size(); ++t) out.grads[t] += results[i].grads[t];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (Matrix& g : out.grads) g *= inv;
  return out;
}

/// One meta-iteration; returns the batch meta-loss before the update.
inline double meta_step(LsrOneModel& model, AdamW& opt, const ObjectiveBatch& batch, const MetaConfig& cfg,
                        int iteration = 0) {
  BatchGradient bg;
  try {
    bg = batch_gradient(model, batch, cfg);
  } catch (const ad::NumericError& e) {
    throw MetaTrainingError(iteration, batch.seed, e.what());
  }
  if (!std::isfinite(bg.loss)) throw MetaTrainingError(iteration, batch.seed, "non-finite meta-loss");
  for (const Matrix& g : bg.grads) {
    if (!g.allFinite()) throw MetaTrainingError(iteration, batch.seed, "non-finite meta-gradient");
  }
  opt.update(model, bg.grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  return bg.loss;
}

struct ValidationMetrics {
  double loss = 0.0;
  double final_value = 0.0;
  double residual = 0.0;
  int diverged = 0;  // problems whose trajectory left the finite range
};

/// Meta-loss, final objective and secant residual averaged over a fixed batch, without gradients.
/// A diverged problem makes the loss +inf; the other two averages use the finite problems only.
inline ValidationMetrics validate(const LsrOneModel& model, const ObjectiveBatch& batch, const MetaConfig& cfg) {
  std::vector<ValidationMetrics> per(batch.size());
  parallel_for(batch.size(), cfg.jobs, [&](std::size_t i) {
    Trajectory t;
    try {
      t = run(*batch.objectives[i], batch.initial_points[i], model, cfg.lsr1, cfg.unroll);
    } catch (const ad::NumericError&) {
      per[i].diverged = 1;
      return;
    }
    std::vector<double> f, r;
    for (const TrajectoryRow& row : t.rows) {
      f.push_back(row.value);
      r.push_back(row.secant_residual);
    }
    per[i].loss = meta_loss(f, r, cfg.secant_weight);
    per[i].final_value = f.back();
    for (double x : r) per[i].residual += x;
    per[i].residual /= static_cast<double>(r.size());
  });
  ValidationMetrics out;
  for (const ValidationMetrics& m : per) {
    out.diverged += m.diverged;
    if (m.diverged) continue;
    out.loss += m.loss;
    out.final_value += m.final_value;
    out.residual += m.residual;
  }
  const auto finite = static_cast<double>(per.size()) - out.diverged;
  out.loss = out.diverged ? std::numeric_limits<double>::infinity() : out.loss / finite;
  out.final_value = finite > 0 ? out.final_value / finite : std::numeric_limits<double>::quiet_NaN();
  out.residual = finite > 0 ? out.residual / finite : std::numeric_limits<double>::quiet_NaN();
  return out;
}

struct MetaRecord {
  int iteration = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // mean since the previous record
  double val_loss = 0.0;
  double val_final_value = 0.0;
  double val_residual = 0.0;
  int val_diverged = 0;
  double wall_time = 0.0;  // seconds since training started; kept out of the CSV
};

inline const std::vector<std::string>& meta_log_columns() {
  static const std::vector<std::string> cols = {"iteration", "train_loss", "val_loss", "val_final_f",
                                                "val_secant_residual", "val_diverged"};
  return cols;
}

inline void write_meta_row(CsvWriter& csv, const MetaRecord& r) {
  csv.cell(r.iteration).cell(r.train_loss).cell(r.val_loss).cell(r.val_final_value).cell(r.val_residual).cell(r.val_diverged);
  csv.end_row();
}

struct TrainOptions {
  // Directory for metatrain.csv, timing.log and checkpoints; empty keeps everything in memory.
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> resume_from;
  // Canonical training configuration; its hash must match when resuming.
  std::string config_text;
  std::function<void(const MetaRecord&)> on_record;
};

struct TrainResult {
  LsrOneModel model;
  LsrOneModel best_model;
  int best_iteration = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<MetaRecord> records;
};

namespace detail {

inline std::string checkpoint_name(int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "checkpoint_%06d.ckpt", iteration);
  return buf;
}

// Rows of an earlier log up to and including `iteration`.
inline std::vector<MetaRecord> read_meta_log(const std::filesystem::path& path, int iteration) {
  std::vector<MetaRecord> rows;
  std::ifstream in(path);
  if (!in) return rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(std::strtod(cell.c_str(), nullptr));
    if (cells.size() != 6) throw std::runtime_error("malformed training log " + path.string());
    MetaRecord r;
    r.iteration = static_cast<int>(cells[0]);
    if (r.iteration > iteration) break;
    r.train_loss = cells[1];
    r.val_loss = cells[2];
    r.val_final_value = cells[3];
    r.val_residual = cells[4];
    r.val_diverged = static_cast<int>(cells[5]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace detail

/// Full meta-training loop. Training batch i is drawn from derive_seed(train_seed, i)
/// and all randomness is counter-derived, so a resumed run replays the uninterrupted one.
inline TrainResult train(const MetaConfig& cfg, const ModelConfig& model_cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  if (!(cfg.lsr1.features == model_cfg.features)) {
    throw std::invalid_argument("train: lsr1 feature mask differs from the model's");
  }
  namespace fs = std::filesystem;
  const bool persist = !opts.output_dir.empty();
  if (persist) fs::create_directories(opts.output_dir);

  TrainResult result;
  AdamW opt;
  int start = 0;
  double pending_sum = 0.0;
  std::uint64_t pending_count = 0;

  if (opts.resume_from) {
    Checkpoint ck = load_checkpoint(*opts.resume_from);
    if (!ck.state) throw CheckpointError("training-state", "checkpoint has no resumable training state");
    if (!(ck.model.config == model_cfg)) throw std::invalid_argument("resume: model configuration differs");
    if (ck.fingerprint != hex64(fnv1a(opts.config_text))) {
      throw std::invalid_argument("resume: training configuration differs from the checkpoint's");
    }
    result.model = std::move(ck.model);
    opt.restore(ck.state->optimizer_step, std::move(ck.state->first_moment), std::move(ck.state->second_moment));
    start = static_cast<int>(ck.state->iteration);
    pending_sum = ck.state->pending_loss_sum;
    pending_count = ck.state->pending_count;
    result.best_iteration = static_cast<int>(ck.state->best_iteration);
    result.best_val_loss = ck.state->best_loss;
    const fs::path best = opts.resume_from->parent_path() / "best.ckpt";
    result.best_model = fs::exists(best) ? load_checkpoint(best).model : result.model;
    if (persist) result.records = detail::read_meta_log(opts.output_dir / "metatrain.csv", start);
  } else {
    result.model = init_model(model_cfg);
    opt = AdamW(result.model);
  }

  const ObjectiveBatch validation = make_batch(cfg.validation_problems, static_cast<std::size_t>(cfg.validation_size),
                                               cfg.validation_seed);
  const auto t0 = std::chrono::steady_clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  auto make_state = [&](int iteration) {
    TrainingState st;
    st.iteration = static_cast<std::uint64_t>(iteration);
    st.optimizer_step = opt.step();
    st.best_iteration = static_cast<std::uint64_t>(result.best_iteration);
    st.best_loss = result.best_val_loss;
    st.pending_loss_sum = pending_sum;
    st.pending_count = pending_count;
    st.first_moment = opt.first_moment();
    st.second_moment = opt.second_moment();
    return st;
  };

  auto flush_log = [&] {
    if (!persist) return;
    std::ostringstream csv_text, timing;
    CsvWriter csv(csv_text);
    csv.header(meta_log_columns());
    for (const MetaRecord& r : result.records) {
      write_meta_row(csv, r);
      timing << r.iteration << ' ' << format_double(r.wall_time) << '\n';
    }
    write_file_atomic(opts.output_dir / "metatrain.csv", csv_text.str());
    write_file_atomic(opts.output_dir / "timing.log", timing.str());
  };

  auto record = [&](int iteration) {
    MetaRecord r;
    r.iteration = iteration;
    if (pending_count > 0) r.train_loss = pending_sum / static_cast<double>(pending_count);
    pending_sum = 0.0;
    pending_count = 0;
    const ValidationMetrics v = validate(result.model, validation, cfg);
    r.val_loss = v.loss;
    r.val_final_value = v.final_value;
    r.val_residual = v.residual;
    r.val_diverged = v.diverged;
    r.wall_time = seconds();
    result.records.push_back(r);
    if (r.val_loss < result.best_val_loss || iteration == 0) {
      result.best_val_loss = r.val_loss;
      result.best_iteration = iteration;
      result.best_model = result.model;
      if (persist) save_checkpoint(opts.output_dir / "best.ckpt", result.model, opts.config_text);
    }
    flush_log();
    if (opts.on_record) opts.on_record(r);
  };

  if (start == 0) record(0);
  for (int it = start + 1; it <= cfg.iterations; ++it) {
    const ObjectiveBatch batch =
        make_batch(cfg.train_problems, static_cast<std::size_t>(cfg.batch), derive_seed(cfg.train_seed, it));
    pending_sum += meta_step(result.model, opt, batch, cfg, it);
    ++pending_count;
    if (it % cfg.validate_every == 0 || it == cfg.iterations) record(it);
    if (persist && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
      const TrainingState st = make_state(it);
      save_checkpoint(opts.output_dir / detail::checkpoint_name(it), result.model, opts.config_text, &st);
    }
  }
  if (persist) {
    const TrainingState st = make_state(std::max(start, cfg.iterations));
    save_checkpoint(opts.output_dir / "final.ckpt", result.model, opts.config_text, &st);
  }
  return result;
}

}  // namespace lsr1
