#include "evt/csv.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "evt/errors.hpp"

namespace evt {

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw IndexError("csv has no column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

bool CsvTable::has_column(const std::string& name) const {
  return std::find(columns.begin(), columns.end(), name) != columns.end();
}

const std::string& CsvTable::cell(std::size_t row, const std::string& name) const {
  return rows.at(row).at(column(name));
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  const auto& s = cell(row, name);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("column '" + name + "' holds non-numeric value '" + s + "'", row + 3);
  return v;
}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != columns.size()) throw DimensionError("csv row width does not match the header");
  rows.push_back(std::move(row));
}

std::string format_number(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

namespace {

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_line(std::ostringstream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << quote(cells[i]);
  os << "\n";
}

std::string header_line(const CsvTable& t) {
  std::string h = "# evt-csv v" + std::to_string(kCsvVersion) + " " + t.schema;
  if (!t.timing_columns.empty()) {
    h += " timing=";
    for (std::size_t i = 0; i < t.timing_columns.size(); ++i) h += (i ? "," : "") + t.timing_columns[i];
  }
  return h;
}

std::vector<std::string> split_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote", lineno);
  cells.push_back(std::move(cur));
  return cells;
}

}  // namespace

std::string to_csv_text(const CsvTable& table) {
  std::ostringstream os;
  os << header_line(table) << "\n";
  write_line(os, table.columns);
  for (const auto& r : table.rows) write_line(os, r);
  return os.str();
}

std::string CsvTable::deterministic_text() const {
  CsvTable copy = *this;
  for (const auto& name : timing_columns) {
    const auto c = copy.column(name);
    for (auto& r : copy.rows) r[c] = "";
  }
  return to_csv_text(copy);
}

CsvTable parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  CsvTable t;
  if (!std::getline(is, line)) throw ParseError("empty input: missing evt-csv header", 1);
  ++lineno;
  {
    std::istringstream hs(line);
    std::string hash, tag, version, timing;
    hs >> hash >> tag >> version >> t.schema >> timing;
    if (hash != "#" || tag != "evt-csv" || t.schema.empty()) throw ParseError("missing evt-csv header", lineno);
    if (version != "v" + std::to_string(kCsvVersion)) throw ParseError("unsupported csv version '" + version + "'", lineno);
    if (!timing.empty()) {
      if (timing.rfind("timing=", 0) != 0) throw ParseError("malformed header field '" + timing + "'", lineno);
      if (timing.size() > 7) t.timing_columns = split_line(timing.substr(7), lineno);
    }
  }
  if (!std::getline(is, line)) throw ParseError("missing column row", lineno + 1);
  ++lineno;
  t.columns = split_line(line, lineno);
  for (const auto& c : t.timing_columns)
    if (!t.has_column(c)) throw ParseError("timing column '" + c + "' is not a column", 1);
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_line(line, lineno);
    if (cells.size() != t.columns.size())
      throw ParseError("expected " + std::to_string(t.columns.size()) + " fields, found " +
                           std::to_string(cells.size()),
                       lineno);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

void write_csv(const CsvTable& table, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << to_csv_text(table);
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return parse_csv(os.str());
}

}  // namespace evt
