#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace approxmpc {

/// Shortest text that round-trips through "%.17g".
std::string format_double(double v);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void write_row(const std::vector<double>& values);
  void write_row(const std::vector<std::string>& cells);

 private:
  std::string path_;
  std::ofstream out_;
  std::size_t columns_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

struct CsvTextTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of `name` in the header; throws if absent.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);
CsvTextTable read_csv_text(const std::string& path);

}  // namespace approxmpc
