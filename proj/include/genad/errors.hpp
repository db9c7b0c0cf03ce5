#pragma once

#include <stdexcept>
#include <string>

namespace genad {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

struct TokenError : std::runtime_error {
  explicit TokenError(const std::string& msg) : std::runtime_error("token error: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct AllocationError : std::runtime_error {
  explicit AllocationError(const std::string& msg) : std::runtime_error("allocation error: " + msg) {}
};

struct ManifestError : std::runtime_error {
  explicit ManifestError(const std::string& msg) : std::runtime_error("manifest error: " + msg) {}
};

struct IncompatibilityError : std::runtime_error {
  explicit IncompatibilityError(const std::string& msg)
      : std::runtime_error("incompatible checkpoint: " + msg) {}
};

struct CorruptionError : std::runtime_error {
  explicit CorruptionError(const std::string& msg) : std::runtime_error("corrupt blob: " + msg) {}
};

struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& msg) : std::runtime_error("metric error: " + msg) {}
};

struct TruncationError : std::runtime_error {
  explicit TruncationError(const std::string& msg)
      : std::runtime_error("truncation error: " + msg) {}
};

}  // namespace genad
