#pragma once

#include <stdexcept>
#include <string>

namespace paddit {

// File and format problems (missing files, malformed headers, size mismatches).
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs that parse but violate a contract (geometry mismatch, bad manifest).
class data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failures: degenerate chains, non-finite targets.
class numerical_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace paddit
