#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tokval {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; carries the 1-based line number when known.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Byte accounting of a binary payload does not add up.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// A domain invariant or operation precondition is violated.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Bad or unsatisfiable configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokval
