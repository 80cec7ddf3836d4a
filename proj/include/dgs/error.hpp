#pragma once

#include <stdexcept>
#include <string>

namespace dgs {

// Invalid shapes, configs, or file contents. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf or divergence detected in numeric state. The CLI maps this to exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace dgs
