// Versioned binary checkpoints for LsrOneModel.
//
// Layout (little-endian throughout):
//   "LSR1CKPT"                      8-byte magic
//   u32 version
//   u32 length, JSON bytes          model config, training-config fingerprint
//   u32 count, count x {u32 name length, name, u32 rows, u32 cols, u64 offset}
//   u64 n, n x f64                  parameter values, column-major per tensor
//   u64 FNV-1a of the value bytes
//   u8 has_state                    optional resumable training state:
//     u64 iteration, u64 optimizer step, u64 best iteration, f64 best loss,
//     f64 pending loss sum, u64 pending count, 2n x f64 moments, u64 FNV-1a
#pragma once

#include "lsr1/model.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lsr1 {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "LSR1CKPT";

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(std::string section, const std::string& what)
      : std::runtime_error("checkpoint " + section + ": " + what), section_(std::move(section)) {}
  [[nodiscard]] const std::string& section() const noexcept { return section_; }

 private:
  std::string section_;
};

class CorruptCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ShapeMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Optimizer state needed to resume meta-training bit-exactly.
struct TrainingState {
  std::uint64_t iteration = 0;
  std::uint64_t optimizer_step = 0;
  std::uint64_t best_iteration = 0;
  double best_loss = 0.0;
  double pending_loss_sum = 0.0;
  std::uint64_t pending_count = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  LsrOneModel model;
  std::vector<TensorShape> manifest;
  // Canonical JSON of the training configuration and its 64-bit hash.
  std::string training_config;
  std::string fingerprint;
  std::optional<TrainingState> state;
};

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"hidden", c.hidden},     {"features", c.features.names()}, {"normalize", c.normalize},
                        {"norm_eps", c.norm_eps}, {"dropout", c.dropout},           {"gamma1", c.gamma1},
                        {"gamma2", c.gamma2},     {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden = j.at("hidden").get<int>();
  c.features = FeatureMask::from_names(j.at("features").get<std::vector<std::string>>());
  c.normalize = j.at("normalize").get<bool>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.gamma1 = j.at("gamma1").get<double>();
  c.gamma2 = j.at("gamma2").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void put_f64(double d) { put(std::bit_cast<std::uint64_t>(d)); }
  void put_bytes(std::string_view s) { out_.append(s); }
  [[nodiscard]] std::size_t size() const { return out_.size(); }
  [[nodiscard]] std::string_view view(std::size_t from) const { return std::string_view(out_).substr(from); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  template <class T>
  T get(const char* section) {
    need(sizeof(T), section);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double get_f64(const char* section) { return std::bit_cast<double>(get<std::uint64_t>(section)); }
  std::string_view get_bytes(std::size_t n, const char* section) {
    need(n, section);
    std::string_view s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] std::size_t pos() const { return pos_; }
  [[nodiscard]] std::size_t remaining() const { return in_.size() - pos_; }
  [[nodiscard]] std::string_view span(std::size_t from, std::size_t to) const { return in_.substr(from, to - from); }

 private:
  void need(std::size_t n, const char* section) const {
    if (in_.size() - pos_ < n) throw CorruptCheckpointError(section, "unexpected end of file");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const LsrOneModel& model, std::string_view training_config = "",
                                        const TrainingState* state = nullptr) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);

  nlohmann::json header{{"model", model_config_to_json(model.config)},
                        {"training_config", std::string(training_config)},
                        {"fingerprint", hex64(fnv1a(training_config))}};
  const std::string header_text = header.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(header_text.size()));
  w.put_bytes(header_text);

  std::vector<std::pair<std::string, const Matrix*>> tensors;
  visit_params(model.params, [&](const std::string& name, const Matrix& m) { tensors.emplace_back(name, &m); });
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m->rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m->cols()));
    w.put<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(m->size());
  }
  w.put<std::uint64_t>(offset);
  const std::size_t data_start = w.size();
  for (const auto& [name, m] : tensors)
    for (Eigen::Index i = 0; i < m->size(); ++i) w.put_f64((*m)(i));
  w.put<std::uint64_t>(fnv1a(w.view(data_start)));

  w.put<std::uint8_t>(state ? 1 : 0);
  if (state) {
    if (state->first_moment.size() != tensors.size() || state->second_moment.size() != tensors.size()) {
      throw std::invalid_argument("serialize_checkpoint: optimizer moments do not match the parameter list");
    }
    const std::size_t state_start = w.size();
    w.put<std::uint64_t>(state->iteration);
    w.put<std::uint64_t>(state->optimizer_step);
    w.put<std::uint64_t>(state->best_iteration);
    w.put_f64(state->best_loss);
    w.put_f64(state->pending_loss_sum);
    w.put<std::uint64_t>(state->pending_count);
    for (const auto* moments : {&state->first_moment, &state->second_moment}) {
      for (std::size_t t = 0; t < tensors.size(); ++t) {
        const Matrix& m = (*moments)[t];
        if (m.rows() != tensors[t].second->rows() || m.cols() != tensors[t].second->cols()) {
          throw std::invalid_argument("serialize_checkpoint: moment shape mismatch for " + tensors[t].first);
        }
        for (Eigen::Index i = 0; i < m.size(); ++i) w.put_f64(m(i));
      }
    }
    w.put<std::uint64_t>(fnv1a(w.view(state_start)));
  }
  return w.take();
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.get_bytes(kCheckpointMagic.size(), "header") != kCheckpointMagic) {
    throw CorruptCheckpointError("header", "bad magic bytes (not an L-SR1 checkpoint)");
  }
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>("header");
  if (ck.version != kCheckpointVersion) {
    throw VersionMismatchError("header", "format version " + std::to_string(ck.version) + " is not supported (expected " +
                                             std::to_string(kCheckpointVersion) + ")");
  }

  const auto header_len = r.get<std::uint32_t>("config");
  const std::string_view header_text = r.get_bytes(header_len, "config");
  try {
    const nlohmann::json header = nlohmann::json::parse(header_text);
    ck.model.config = model_config_from_json(header.at("model"));
    ck.training_config = header.at("training_config").get<std::string>();
    ck.fingerprint = header.at("fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError("config", e.what());
  } catch (const std::invalid_argument& e) {
    throw CorruptCheckpointError("config", e.what());
  }

  const std::vector<TensorShape> expected = expected_shapes(ck.model.config);
  const auto count = r.get<std::uint32_t>("manifest");
  if (count != expected.size()) {
    throw ShapeMismatchError("manifest", "expected " + std::to_string(expected.size()) + " tensors, found " +
                                             std::to_string(count));
  }
  std::uint64_t running = 0;
  for (std::uint32_t t = 0; t < count; ++t) {
    TensorShape s;
    const auto name_len = r.get<std::uint32_t>("manifest");
    s.name = std::string(r.get_bytes(name_len, "manifest"));
    s.rows = r.get<std::uint32_t>("manifest");
    s.cols = r.get<std::uint32_t>("manifest");
    const auto offset = r.get<std::uint64_t>("manifest");
    if (s.name != expected[t].name) {
      throw CorruptCheckpointError("manifest", "tensor " + std::to_string(t) + " is '" + s.name + "', expected '" +
                                                   expected[t].name + "'");
    }
    if (s.rows != expected[t].rows || s.cols != expected[t].cols) {
      throw ShapeMismatchError("manifest", s.name + " has shape " + ad::shape_string(s.rows, s.cols) +
                                               ", configuration implies " +
                                               ad::shape_string(expected[t].rows, expected[t].cols));
    }
    if (offset != running) throw CorruptCheckpointError("manifest", s.name + " has an inconsistent offset");
    running += static_cast<std::uint64_t>(s.rows * s.cols);
    ck.manifest.push_back(std::move(s));
  }

  const auto n = r.get<std::uint64_t>("data");
  if (n != running) throw CorruptCheckpointError("data", "value count does not match the manifest");
  const std::size_t data_start = r.pos();
  std::vector<double> values(n);
  for (auto& v : values) v = r.get_f64("data");
  const std::string_view data_bytes = r.span(data_start, r.pos());
  if (r.get<std::uint64_t>("data") != fnv1a(data_bytes)) throw CorruptCheckpointError("data", "checksum mismatch");

  std::size_t t = 0;
  std::uint64_t base = 0;
  visit_params(ck.model.params, [&](const std::string&, Matrix& m) {
    const TensorShape& s = ck.manifest[t++];
    m.resize(s.rows, s.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = values[base + static_cast<std::uint64_t>(i)];
    base += static_cast<std::uint64_t>(m.size());
  });

  const auto has_state = r.get<std::uint8_t>("training-state");
  if (has_state > 1) throw CorruptCheckpointError("training-state", "invalid presence flag");
  if (has_state == 1) {
    const std::size_t state_start = r.pos();
    TrainingState st;
    st.iteration = r.get<std::uint64_t>("training-state");
    st.optimizer_step = r.get<std::uint64_t>("training-state");
    st.best_iteration = r.get<std::uint64_t>("training-state");
    st.best_loss = r.get_f64("training-state");
    st.pending_loss_sum = r.get_f64("training-state");
    st.pending_count = r.get<std::uint64_t>("training-state");
    for (auto* moments : {&st.first_moment, &st.second_moment}) {
      for (const TensorShape& s : ck.manifest) {
        Matrix m(s.rows, s.cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = r.get_f64("training-state");
        moments->push_back(std::move(m));
      }
    }
    const std::string_view state_bytes = r.span(state_start, r.pos());
    if (r.get<std::uint64_t>("training-state") != fnv1a(state_bytes)) {
      throw CorruptCheckpointError("training-state", "checksum mismatch");
    }
    ck.state = std::move(st);
  }
  if (r.remaining() != 0) throw CorruptCheckpointError("trailer", "unexpected trailing bytes");
  return ck;
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const LsrOneModel& model,
                            std::string_view training_config = "", const TrainingState* state = nullptr) {
  write_file_atomic(path, serialize_checkpoint(model, training_config, state));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace lsr1
