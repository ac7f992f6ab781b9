#pragma once

// CSV plumbing shared by every pipeline stage. Numbers are serialised with
// std::to_chars (shortest representation that round-trips a double exactly),
// which makes file output byte-stable across runs. Missing values travel as
// empty fields and parse back to NaN.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace kneesight::csv {

// Shortest round-trip decimal form; NaN becomes the empty field.
std::string format_double(double v);

// Empty field -> NaN; anything else must parse fully or throws
// std::invalid_argument naming the offending text.
double parse_double(std::string_view s);

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  // Index of a named column; throws std::invalid_argument naming the column.
  std::size_t col(const std::string& name) const;
};

// Strict reader: header row required, every record must match its width.
// Fields are plain (no quoting); CRLF input is tolerated.
Table read(const std::filesystem::path& path);

// Atomic write: the table is written to "<path>.tmp" and renamed into place,
// so a crash never leaves a partial artifact. Parent directories are created.
void write(const std::filesystem::path& path, const Table& table);

// Same atomicity for arbitrary text artifacts (JSON reports etc.).
void write_text(const std::filesystem::path& path, const std::string& content);

}  // namespace kneesight::csv
