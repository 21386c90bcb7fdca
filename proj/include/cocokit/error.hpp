#pragma once

#include <stdexcept>
#include <string>

namespace cocokit {

/// Base for every error raised by the library. The CLI maps the subclasses
/// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (bad shape, non-positive regularizer, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable, unwritable or malformed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or runaway cost during optimization.
class Divergence : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace cocokit
