#pragma once

#include <stdexcept>
#include <string>

namespace probebench {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input supplied by the caller: malformed files, violated preconditions,
/// inconsistent configuration. The CLI maps this to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Failure while decoding or loading a persisted artifact.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Failure inside an embedding provider (in-process or external).
class ProviderError : public Error {
 public:
  using Error::Error;
};

}  // namespace probebench
