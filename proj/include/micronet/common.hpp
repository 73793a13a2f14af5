#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace micronet {

/// Raised when tensor shapes or op geometry are inconsistent.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when an architecture/config record is invalid.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a serialized artifact (bundle, image, ...) is malformed.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a computation degenerates (nonfinite loss, empty dataset).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;

  bool operator==(const Shape4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape4& o) const { return !(*this == o); }

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

}  // namespace micronet
