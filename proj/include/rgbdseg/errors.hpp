#pragma once

#include <stdexcept>
#include <string>

namespace rgbdseg {

// Raised when a computation produces or receives non-finite values.
// The CLI maps this to exit code 3.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

// File and format errors. The CLI maps this to exit code 2.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace rgbdseg
