#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace evt {

inline constexpr int kCsvVersion = 1;

/// Result table. On disk:
///
///   # evt-csv v1 <schema> timing=<col>,<col>
///   col,col,...
///   value,value,...
///
/// Timing columns hold wall-clock derived values and are excluded from
/// determinism comparisons.
struct CsvTable {
  std::string schema;
  std::vector<std::string> columns;
  std::vector<std::string> timing_columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;  // throws IndexError
  bool has_column(const std::string& name) const;
  const std::string& cell(std::size_t row, const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;
  void add_row(std::vector<std::string> row);
  /// Serialized text with timing columns blanked out.
  std::string deterministic_text() const;
};

/// Shortest round-trip representation, fixed for reproducible files.
std::string format_number(double value);

std::string to_csv_text(const CsvTable& table);
/// Throws ParseError (1-based line) on a missing or unsupported header,
/// ragged rows or unterminated quotes.
CsvTable parse_csv(const std::string& text);

void write_csv(const CsvTable& table, const std::filesystem::path& path);
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace evt
