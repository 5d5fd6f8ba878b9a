#include "approxmpc/csv.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "approxmpc/errors.hpp"

namespace approxmpc {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : path_(path), out_(path), columns_(header.size()) {
  if (!out_) throw Error("cannot open " + path + " for writing");
  write_row(header);
}

void CsvWriter::write_row(const std::vector<double>& values) {
  std::vector<std::string> cells;
  cells.reserve(values.size());
  for (double v : values) cells.push_back(format_double(v));
  write_row(cells);
}

void CsvWriter::write_row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw InvalidArgument(path_ + ": row width differs from header");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  if (!out_) throw Error("write failed: " + path_);
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::size_t CsvTextTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw InvalidArgument("CSV has no column '" + name + "'");
}

CsvTextTable read_csv_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  CsvTextTable table;
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument(path + ": empty CSV");
  table.header = split_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != table.header.size()) {
      throw InvalidArgument(path + ":" + std::to_string(lineno) + ": wrong number of cells");
    }
    table.rows.push_back(std::move(cells));
  }
  return table;
}

CsvTable read_csv(const std::string& path) {
  CsvTextTable text = read_csv_text(path);
  CsvTable table;
  table.header = std::move(text.header);
  table.rows.reserve(text.rows.size());
  for (std::size_t r = 0; r < text.rows.size(); ++r) {
    std::vector<double> row;
    row.reserve(text.rows[r].size());
    for (const auto& cell : text.rows[r]) {
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') {
        throw InvalidArgument(path + ":" + std::to_string(r + 2) + ": not a number: '" + cell + "'");
      }
      row.push_back(v);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace approxmpc
