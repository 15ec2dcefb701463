#pragma once

#include <stdexcept>
#include <string>

namespace peernet {

// Exceptions carry a short machine-parsable category used by the CLI's
// one-line error reporting.
class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

private:
  std::string category_;
};

class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

class NumericError : public Error {
public:
  explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error("io", msg) {}
};

}  // namespace peernet
