#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace relpatch {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Shape or broadcast mismatch between tensors, or a malformed op application.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Invalid model/run configuration (bad fields, missing files, unknown keys).
class ConfigError : public Error {
public:
  using Error::Error;
};

// Numeric failure: NaN/Inf where finite values are required, undefined PCC,
// degenerate denominators in rule rewrites.
class NumericError : public Error {
public:
  using Error::Error;
};

// Checkpoint / dataset / report I/O failure.
class IoError : public Error {
public:
  using Error::Error;
};

// Rule applied to an op kind it does not cover, or an uncovered layer kind.
class RuleError : public Error {
public:
  using Error::Error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <class T, class... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_into(os, rest...);
}
}  // namespace detail

// Builds an error message from heterogeneous parts.
template <class... Parts>
std::string cat(const Parts&... parts) {
  std::ostringstream os;
  detail::cat_into(os, parts...);
  return os.str();
}

}  // namespace relpatch
