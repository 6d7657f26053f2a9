#pragma once

#include <stdexcept>
#include <string>

namespace arra {

// Exit codes used by the CLI: 0 success, 2 config, 3 dependency, 4 numerical.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DependencyError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  using Error::Error;
};

struct IntegrityError : Error {
  using Error::Error;
};

// Caption / manifest parsing, carries the byte offset of the failure.
struct ParseError : Error {
  ParseError(const std::string& msg, size_t position)
      : Error(msg + " (at position " + std::to_string(position) + ")"), position(position) {}
  size_t position;
};

}  // namespace arra
