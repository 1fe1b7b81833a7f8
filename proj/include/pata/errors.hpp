#pragma once

#include <stdexcept>
#include <string>

namespace pata {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad attack parameters, resolution mismatch, empty pools.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid caller-supplied data: out-of-bounds prompts, shape mismatches, missing files.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became non-finite. `iteration` is -1 outside an attack loop.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, int iteration = -1)
      : Error(iteration >= 0 ? what + " (iteration " + std::to_string(iteration) + ")" : what),
        iteration_(iteration) {}

  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

}  // namespace pata
