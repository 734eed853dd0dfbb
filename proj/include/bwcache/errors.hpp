#pragma once

#include <stdexcept>

namespace bwcache {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An input makes a ratio undefined (zero-norm or constant reference).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller broke the decide() calling convention.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed trace or file content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bwcache
