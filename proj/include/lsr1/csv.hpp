// Minimal CSV output with round-trippable, locale-independent numbers.
#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace lsr1 {

/// Shortest form that round-trips a double; "nan" / "inf" / "-inf" otherwise.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& out) : out_(out) {}

  void header(const std::vector<std::string>& columns) {
    cells_ = columns;
    end_row();
  }

  CsvWriter& cell(std::string_view s) {
    cells_.emplace_back(s);
    return *this;
  }
  CsvWriter& cell(double v) { return cell(format_double(v)); }
  template <class I>
    requires std::is_integral_v<I>
  CsvWriter& cell(I v) {
    return cell(std::string_view(std::to_string(v)));
  }

  void end_row() {
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells_[i];
    }
    out_ << '\n';
    cells_.clear();
  }

 private:
  std::ostream& out_;
  std::vector<std::string> cells_;
};

}  // namespace lsr1
