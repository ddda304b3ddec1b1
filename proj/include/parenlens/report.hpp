#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace parenlens {

/// Six significant digits (printf %.6g). Every number written to a results
/// CSV or served as JSON goes through this, so the two agree textually.
std::string format_number(double v);
/// Nine significant digits, enough to round-trip a float. Used for raw dumps.
std::string format_exact(double v);
/// Parses format_number's output back; the round trip is stable.
double rounded6(double v);

/// RFC-4180 table: mandatory header row, CRLF line ends, fields quoted when
/// they contain a comma, quote, CR or LF.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  CsvTable() = default;
  explicit CsvTable(std::vector<std::string> h) : header(std::move(h)) {}

  void add_row(std::vector<std::string> row);
  /// Throws NotFoundError.
  std::size_t column(std::string_view name) const;
  const std::string& cell(std::size_t row, std::string_view name) const { return rows.at(row).at(column(name)); }
  /// Rows whose `name` column equals `value`, same header.
  CsvTable filter(std::string_view name, std::string_view value) const;
};

void write_csv(std::ostream& os, const CsvTable& table);
void write_csv_file(const std::string& path, const CsvTable& table);
/// Accepts CRLF or LF line ends. Throws IoError on malformed quoting or ragged rows.
CsvTable read_csv(std::istream& is);
CsvTable read_csv_file(const std::string& path);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::string& path);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string model_hash;
  std::string dataset_hash;
  std::string tool_version;
  std::string timestamp;  // UTC ISO-8601; SOURCE_DATE_EPOCH overrides the clock

  static RunManifest make(std::string command);
  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

void write_manifest(const std::string& path, const RunManifest& m);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view text);

}  // namespace parenlens
