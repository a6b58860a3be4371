#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmoe {

// Shape/validation problems: caller passed something structurally wrong.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A forward operation produced NaN/Inf, or math preconditions failed at runtime.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File container problems (bad magic, truncation, checksum mismatch, ...).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace gmoe
