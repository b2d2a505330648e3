#pragma once

#include <stdexcept>
#include <string>

namespace extradiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad file contents, shape or dimension mismatch, unknown labels.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A configuration or precondition violation supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Normal-equation matrix is singular at the requested regularization.
class RankDeficientError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace extradiff
