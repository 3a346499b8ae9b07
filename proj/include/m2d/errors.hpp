#pragma once

#include <stdexcept>
#include <string>

namespace m2d {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: config -> 2, data/io -> 3, divergence -> 4, anything else -> 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error("domain error: " + msg) {}
};

class ConsistencyError : public Error {
 public:
  explicit ConsistencyError(const std::string& msg) : Error("consistency error: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Raised when a training loss goes non-finite or leaves its valid range.
class DivergenceError : public Error {
 public:
  DivergenceError(long step, const std::string& msg)
      : Error("divergence at step " + std::to_string(step) + ": " + msg), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace m2d
