#pragma once

#include <stdexcept>
#include <string>

namespace gradflow {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatchError : Error {
  explicit ShapeMismatchError(const std::string& msg) : Error(msg) {}
};

struct InvalidShapeError : Error {
  explicit InvalidShapeError(const std::string& msg) : Error(msg) {}
};

struct NonFiniteError : Error {
  explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

struct NoConvergenceError : Error {
  explicit NoConvergenceError(const std::string& msg) : Error(msg) {}
};

struct NonPositiveError : Error {
  explicit NonPositiveError(const std::string& msg) : Error(msg) {}
};

struct InsufficientSamplesError : Error {
  explicit InsufficientSamplesError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct MismatchedConfigsError : ConfigError {
  explicit MismatchedConfigsError(const std::string& msg) : ConfigError(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace gradflow
