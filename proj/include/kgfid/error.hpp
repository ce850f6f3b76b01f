#pragma once

#include <stdexcept>
#include <string>

namespace kgfid {

/// Base class for every error the library raises. `code()` is a stable
/// machine-readable tag used by the CLI when reporting failures as JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error("dimension_error", m) {}
};

/// NaN/Inf values, invalid probability distributions.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric_error", m) {}
};

/// All-masked attention rows.
class MaskError : public Error {
 public:
  explicit MaskError(const std::string& m) : Error("degenerate_mask", m) {}
};

/// Autodiff tape misuse (backward without a recorded graph, twice, ...).
class GraphError : public Error {
 public:
  explicit GraphError(const std::string& m) : Error("autodiff_error", m) {}
};

/// Precondition on a scalar argument (bounds, counts, empty inputs).
class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& m) : Error("invalid_argument", m) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& m)
      : Error("parse_error", source + ":" + std::to_string(line) + ": " + m),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error("validation_error", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("invalid_config", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io_error", m) {}
};

}  // namespace kgfid
