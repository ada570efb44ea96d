#pragma once

#include <stdexcept>
#include <string>

namespace remem {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: wrong shapes, out-of-range indices, malformed sessions.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: non-PSD covariance, singular direction, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Optimizer blew up. Carries the iteration at which it was detected.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, int iteration)
      : NumericalError(what + " (iteration " + std::to_string(iteration) + ")"),
        message_(what),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }
  /// The message without the iteration suffix.
  const std::string& message() const { return message_; }

 private:
  std::string message_;
  int iteration_;
};

}  // namespace remem
