#pragma once

#include <stdexcept>
#include <string>

namespace combo {

/// Error categories, each mapped to a CLI exit code.
enum class ErrorKind {
  config,     // bad configuration or manifest/config mismatch (exit 2)
  data,       // malformed or inconsistent dataset contents (exit 3)
  runtime,    // I/O failures and everything else (exit 4)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::config: return 2;
      case ErrorKind::data: return 3;
      case ErrorKind::runtime: return 4;
    }
    return 4;
  }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Feature map token layout is not a square grid.
class LayoutError : public DataError {
 public:
  explicit LayoutError(const std::string& what) : DataError(what) {}
};

/// Tensor extents do not agree.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

/// Operation invoked on an object in the wrong state (e.g. a consumed tape).
class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

}  // namespace combo
