#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fln::io {

// Little-endian float64 encoding, independent of the host byte order.
void append_le_doubles(std::string& out, std::span<const double> values);
std::vector<double> decode_le_doubles(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Minimal CSV writer: fields containing separators or quotes are quoted.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string>& fields);
  const std::string& str() const { return text_; }
  std::size_t rows() const { return rows_; }

 private:
  std::size_t columns_;
  std::size_t rows_ = 0;
  std::string text_;
};

// Shortest round-trippable decimal form.
std::string format_double(double value);

}  // namespace fln::io
