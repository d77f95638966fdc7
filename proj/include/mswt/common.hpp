#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mswt {

// File/corpus problems (exit code 3 at the CLI).
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf or a failed numerical check (exit code 4 at the CLI).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

}  // namespace mswt
