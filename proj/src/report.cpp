#include "parenlens/report.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <istream>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "parenlens/error.hpp"

namespace parenlens {

std::string format_number(double v) {
  if (v == 0) v = 0;  // no "-0"
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string format_exact(double v) {
  if (v == 0) v = 0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double rounded6(double v) { return std::strtod(format_number(v).c_str(), nullptr); }

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header.size()) {
    throw InvalidArgument("csv row has " + std::to_string(row.size()) + " fields, header has " +
                          std::to_string(header.size()));
  }
  rows.push_back(std::move(row));
}

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw NotFoundError("csv has no column '" + std::string(name) + "'");
}

CsvTable CsvTable::filter(std::string_view name, std::string_view value) const {
  CsvTable out(header);
  const auto c = column(name);
  for (const auto& r : rows) {
    if (r[c] == value) out.rows.push_back(r);
  }
  return out;
}

namespace {

void write_field(std::ostream& os, const std::string& f) {
  if (f.find_first_of(",\"\r\n") == std::string::npos) {
    os << f;
    return;
  }
  os << '"';
  for (char c : f) {
    if (c == '"') os << '"';
    os << c;
  }
  os << '"';
}

void write_record(std::ostream& os, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) os << ',';
    write_field(os, fields[i]);
  }
  os << "\r\n";
}

}  // namespace

void write_csv(std::ostream& os, const CsvTable& table) {
  write_record(os, table.header);
  for (const auto& r : table.rows) write_record(os, r);
}

void write_csv_file(const std::string& path, const CsvTable& table) {
  std::ostringstream os;
  write_csv(os, table);
  write_text_file(path, os.str());
}

CsvTable read_csv(std::istream& is) {
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, any = false;
  std::size_t i = 0;
  auto end_record = [&] {
    rec.push_back(std::move(field));
    field.clear();
    records.push_back(std::move(rec));
    rec.clear();
    any = false;
  };
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          i += 2;
          continue;
        }
        quoted = false;
      } else {
        field += c;
      }
      ++i;
      continue;
    }
    if (c == '"') {
      if (!field.empty()) throw IoError("csv: quote inside an unquoted field");
      quoted = true;
      any = true;
    } else if (c == ',') {
      rec.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_record();
    } else {
      field += c;
      any = true;
    }
    ++i;
  }
  if (quoted) throw IoError("csv: unterminated quoted field");
  if (any || !field.empty() || !rec.empty()) end_record();
  if (records.empty()) throw IoError("csv: missing header row");

  CsvTable t(std::move(records.front()));
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size()) {
      throw IoError("csv: row " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                    " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_csv(in);
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::string& path) { return fnv1a_hex(read_text_file(path)); }

RunManifest RunManifest::make(std::string command) {
  RunManifest m;
  m.command = std::move(command);
  m.tool_version = PARENLENS_VERSION;
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  m.timestamp = buf;
  return m;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["model_hash"] = model_hash;
  j["dataset_hash"] = dataset_hash;
  j["tool_version"] = tool_version;
  j["timestamp"] = timestamp;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    RunManifest m;
    m.command = j.at("command");
    m.config_hash = j.at("config_hash");
    m.seed = j.at("seed");
    m.model_hash = j.at("model_hash");
    m.dataset_hash = j.at("dataset_hash");
    m.tool_version = j.at("tool_version");
    m.timestamp = j.at("timestamp");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("manifest: ") + e.what());
  }
}

void write_manifest(const std::string& path, const RunManifest& m) { write_text_file(path, m.to_json()); }

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace parenlens
