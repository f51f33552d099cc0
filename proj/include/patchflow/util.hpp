#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchflow {

// Shape/contract violations carry the offending dimensions in the message.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Shortest round-trippable decimal form; identical doubles give identical text.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

inline std::string shape_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Rows of already-formatted cells -> CSV text with a header line.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(std::move(header)) {}

  void add_row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size())
      throw std::invalid_argument("csv row width " + std::to_string(cells.size()) +
                                  " != header width " + std::to_string(columns_.size()));
    rows_.push_back(cells);
  }

  std::string str() const {
    std::string out = join(columns_);
    for (const auto& r : rows_) out += join(r);
    return out;
  }

  void save(const std::filesystem::path& path) const { write_text_file(path, str()); }

 private:
  static std::string join(const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) line += ",";
      line += cells[i];
    }
    line += "\n";
    return line;
  }
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace patchflow
