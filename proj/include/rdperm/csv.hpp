#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace rdperm {

/// Header plus raw string cells. Quoted fields ("a,b", "say ""hi""") are
/// unescaped; rows shorter than the header are padded with empty cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column position, or -1 when absent.
  long column(const std::string &name) const;
};

CsvTable parse_csv(std::istream &in);
CsvTable read_csv(const std::filesystem::path &path);

/// Shortest round-trip decimal text for a double ("nan", "inf" for non-finite).
std::string format_number(double value);

/// Fixed significant-digit rendering shared by summary tables and CSV exports.
std::string format_table_number(double value);

} // namespace rdperm
