#pragma once

#include <stdexcept>
#include <string>

namespace hfd {

// Malformed, truncated or unreadable data: image files, bitstreams,
// checkpoints. Precondition violations use std::invalid_argument instead.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A computation produced NaN or Inf where finite values are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace hfd
