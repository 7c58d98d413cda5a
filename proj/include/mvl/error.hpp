#pragma once

#include <stdexcept>
#include <string>

namespace mvl {

/// Broad failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
  schema,      // malformed config / manifest / checkpoint header
  validation,  // well-formed input that violates a data contract
  runtime,     // failures while training, evaluating or doing I/O
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what)
      : Error(ErrorKind::schema, "schema violation: " + what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorKind::validation, what) {}
};

class RuntimeError : public Error {
 public:
  explicit RuntimeError(const std::string& what)
      : Error(ErrorKind::runtime, what) {}
};

/// Raised by metric functions whose value is mathematically undefined for the
/// given input (e.g. R^2 with constant ground truth).
class UndefinedMetric : public Error {
 public:
  explicit UndefinedMetric(const std::string& what)
      : Error(ErrorKind::validation, what) {}
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::schema: return 2;
    case ErrorKind::validation: return 3;
    case ErrorKind::runtime: return 4;
  }
  return 4;
}

}  // namespace mvl
