#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace harmonia {

/// Flat subset of TOML: `key = value` lines, `[table]` headers (keys become
/// "table.key"), '#' comments, and values that are basic strings, integers,
/// floats, booleans or single-line arrays of numbers.
using TomlValue = std::variant<std::string, std::int64_t, double, bool, std::vector<double>>;

class TomlTable {
 public:
  static TomlTable parse(const std::string& text);
  static TomlTable load(const std::string& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, TomlValue>& values() const { return values_; }

  // Typed getters throw ConfigError naming the key on a type mismatch.
  std::optional<std::string> get_string(const std::string& key) const;
  std::optional<std::int64_t> get_int(const std::string& key) const;
  /// Accepts integers too.
  std::optional<double> get_double(const std::string& key) const;
  std::optional<bool> get_bool(const std::string& key) const;
  std::optional<std::vector<double>> get_numbers(const std::string& key) const;

 private:
  std::map<std::string, TomlValue> values_;
};

}  // namespace harmonia
