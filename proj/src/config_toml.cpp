#include <harmonia/config_toml.hpp>

#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

namespace harmonia {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '\\' && in_string) { ++i; continue; }
    if (c == '"') in_string = !in_string;
    if (c == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

bool valid_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

std::optional<std::int64_t> parse_int(std::string s) {
  s.erase(std::remove(s.begin(), s.end(), '_'), s.end());
  if (!s.empty() && s[0] == '+') s.erase(0, 1);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::optional<double> parse_float(std::string s) {
  s.erase(std::remove(s.begin(), s.end(), '_'), s.end());
  if (!s.empty() && s[0] == '+') s.erase(0, 1);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::string parse_string(const std::string& raw, const std::string& where) {
  if (raw.size() < 2 || raw.back() != '"') throw ConfigError(where + ": unterminated string");
  std::string out;
  for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
    char c = raw[i];
    if (c == '"') throw ConfigError(where + ": unexpected quote in string");
    if (c == '\\') {
      if (i + 2 >= raw.size()) throw ConfigError(where + ": dangling escape");
      switch (raw[++i]) {
        case 'n': c = '\n'; break;
        case 't': c = '\t'; break;
        case '"': c = '"'; break;
        case '\\': c = '\\'; break;
        default: throw ConfigError(where + ": unsupported escape");
      }
    }
    out += c;
  }
  return out;
}

TomlValue parse_value(const std::string& raw, const std::string& where) {
  if (raw.empty()) throw ConfigError(where + ": missing value");
  if (raw[0] == '"') return parse_string(raw, where);
  if (raw == "true") return true;
  if (raw == "false") return false;
  if (raw[0] == '[') {
    if (raw.back() != ']') throw ConfigError(where + ": arrays must be on one line");
    std::vector<double> out;
    std::stringstream items(raw.substr(1, raw.size() - 2));
    std::string item;
    while (std::getline(items, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      const auto v = parse_float(item);
      if (!v) throw ConfigError(where + ": array items must be numbers");
      out.push_back(*v);
    }
    return out;
  }
  if (auto i = parse_int(raw)) return *i;
  if (auto f = parse_float(raw)) return *f;
  throw ConfigError(where + ": cannot parse value '" + raw + "'");
}

}  // namespace

TomlTable TomlTable::parse(const std::string& text) {
  TomlTable table;
  std::istringstream in(text);
  std::string line, prefix;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "line " + std::to_string(lineno);
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(where + ": malformed table header");
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (!valid_key(name)) throw ConfigError(where + ": invalid table name");
      prefix = name + ".";
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
    const std::string full = prefix + key;
    if (table.values_.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    table.values_[full] = parse_value(trim(line.substr(eq + 1)), where + " (" + full + ")");
  }
  return table;
}

TomlTable TomlTable::load(const std::string& path) {
  try {
    return parse(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::optional<std::string> TomlTable::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  if (auto* s = std::get_if<std::string>(&it->second)) return *s;
  throw ConfigError(key + ": expected a string");
}

std::optional<std::int64_t> TomlTable::get_int(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  if (auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
  throw ConfigError(key + ": expected an integer");
}

std::optional<double> TomlTable::get_double(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  if (auto* v = std::get_if<double>(&it->second)) return *v;
  if (auto* v = std::get_if<std::int64_t>(&it->second)) return double(*v);
  throw ConfigError(key + ": expected a number");
}

std::optional<bool> TomlTable::get_bool(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  if (auto* v = std::get_if<bool>(&it->second)) return *v;
  throw ConfigError(key + ": expected a boolean");
}

std::optional<std::vector<double>> TomlTable::get_numbers(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  if (auto* v = std::get_if<std::vector<double>>(&it->second)) return *v;
  throw ConfigError(key + ": expected an array of numbers");
}

}  // namespace harmonia
