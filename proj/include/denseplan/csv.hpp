#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "denseplan/errors.hpp"

namespace denseplan {

// 17 significant digits: enough to round-trip an IEEE double exactly, so
// reruns with identical seeds produce byte-identical CSV files.
inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_int(std::int64_t v) { return std::to_string(v); }

// Minimal CSV emitter; the header is always written first.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path) {
    if (!out_) throw ConfigError("cannot open output file " + path);
    columns_ = header.size();
    write_row(header);
  }

  void write_row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) {
      throw ConfigError("CSV row has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(columns_));
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  void close() { out_.close(); }

 private:
  std::ofstream out_;
  std::size_t columns_ = 0;
};

}  // namespace denseplan
