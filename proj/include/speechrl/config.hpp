#pragma once

// Reader for the TOML subset used by experiment configs: [section] and
// [section.sub] headers, `key = value` lines, # comments, and values that are
// quoted strings, integers, floats, booleans or flat arrays of those.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace speechrl {

struct ConfigValue {
  enum class Kind { kString, kInt, kFloat, kBool, kArray };
  Kind kind = Kind::kString;
  std::string text;  // string payload, or the literal as written
  std::int64_t i = 0;
  double f = 0.0;
  bool b = false;
  std::vector<ConfigValue> items;

  std::string canonical() const;
};

class Config {
 public:
  static Config parse(std::string_view text);
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, ConfigValue v) { values_[key] = std::move(v); }
  void set_u64(const std::string& key, std::uint64_t v);

  // Typed getters; a missing key returns the fallback, a present key of the
  // wrong type throws ConfigError. Every key read is marked as used.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

  // Throws ConfigError naming any key that no getter has read.
  void check_all_used() const;

  // Sorted `key = value` lines; stable across formatting differences.
  std::string canonical() const;

 private:
  const ConfigValue* find(const std::string& key) const;

  std::map<std::string, ConfigValue> values_;
  mutable std::set<std::string> used_;
};

}  // namespace speechrl
