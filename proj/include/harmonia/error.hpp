#pragma once

#include <stdexcept>
#include <string>

namespace harmonia {

// Invalid arguments use std::invalid_argument; the types below cover the
// remaining failure classes callers need to tell apart.

class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& cause)
      : std::runtime_error(path + ": " + cause), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// Schema or invariant violation in a structured document. `field` is a
/// JSON-pointer-like path such as "curves/1/4/0".
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& field, const std::string& what)
      : std::runtime_error(field.empty() ? what : field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace harmonia
