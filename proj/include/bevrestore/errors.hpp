#pragma once

#include <stdexcept>
#include <string>

namespace bevrestore {

// Base class for every failure raised by the library. kind() is a short,
// stable token the CLI prints as the machine-parsable error class.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape_error", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

class BoundsError : public Error {
 public:
  explicit BoundsError(const std::string& what) : Error("bounds_error", what) {}
};

class OutOfScopeError : public Error {
 public:
  explicit OutOfScopeError(const std::string& what) : Error("out_of_scope", what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage_error", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric_error", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error("load_error", what) {}
};

}  // namespace bevrestore
