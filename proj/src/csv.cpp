#include "rdperm/csv.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>

#include "rdperm/errors.hpp"

namespace rdperm {

namespace {

std::vector<std::string> split_record(std::istream &in, bool &ok) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  ok = any;
  if (any)
    fields.push_back(std::move(field));
  return fields;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos)
    return {};
  const auto last = s.find_last_not_of(" \t");
  return s.substr(first, last - first + 1);
}

} // namespace

long CsvTable::column(const std::string &name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name)
      return static_cast<long>(i);
  return -1;
}

CsvTable parse_csv(std::istream &in) {
  CsvTable table;
  bool ok = false;
  table.header = split_record(in, ok);
  if (!ok)
    return table;
  if (!table.header.empty() && table.header[0].rfind("\xEF\xBB\xBF", 0) == 0)
    table.header[0].erase(0, 3);
  for (auto &h : table.header)
    h = trim(h);
  while (true) {
    auto row = split_record(in, ok);
    if (!ok)
      break;
    if (row.size() == 1 && trim(row[0]).empty())
      continue;
    row.resize(std::max(row.size(), table.header.size()));
    for (auto &cell : row)
      cell = trim(cell);
    table.rows.push_back(std::move(row));
  }
  return table;
}

CsvTable read_csv(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
  return parse_csv(in);
}

std::string format_number(double value) {
  if (std::isnan(value))
    return "nan";
  if (std::isinf(value))
    return value > 0 ? "inf" : "-inf";
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, value);
    if (std::strtod(buf, nullptr) == value)
      break;
  }
  return buf;
}

std::string format_table_number(double value) {
  if (std::isnan(value))
    return "NA";
  if (std::isinf(value))
    return value > 0 ? "Inf" : "-Inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", value);
  return buf;
}

} // namespace rdperm
