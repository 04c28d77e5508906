// Small file-format helpers shared by the dataset, checkpoint and CLI code:
// length-prefixed little-endian float64 arrays, FNV-1a digests and plain
// key=value configuration text.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace arterialnet::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for invalid user configuration (CLI maps it to exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_u64(std::ostream& os, std::uint64_t v);
std::uint64_t read_u64(std::istream& is);
void write_f64(std::ostream& os, double v);
double read_f64(std::istream& is);
void write_string(std::ostream& os, std::string_view s);
std::string read_string(std::istream& is);

// uint64 count followed by `count` float64 values.
void write_array(std::ostream& os, std::span<const double> values);
std::vector<double> read_array(std::istream& is);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t file_digest(const std::filesystem::path& path);
// Digest over every regular file below `dir`, visited in sorted path order,
// mixing in the relative path of each file.
std::uint64_t tree_digest(const std::filesystem::path& dir);
std::string hex64(std::uint64_t v);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

// Ordered key=value pairs. Lines starting with '#' and blank lines are
// ignored. Keys are tracked as they are read so that leftovers can be
// reported as unknown.
class KeyValues {
 public:
  KeyValues() = default;
  static KeyValues parse(std::string_view text, const std::string& origin = "config");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool contains(const std::string& key) const;
  // Later sources win.
  void merge(const KeyValues& other);

  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<long> get_ints(const std::string& key, const std::vector<long>& fallback) const;

  // Throws ConfigError listing keys that were never read.
  void reject_unknown() const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  std::string to_text() const;

 private:
  const std::string* find(const std::string& key) const;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

std::string format_double(double v);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace arterialnet::io
