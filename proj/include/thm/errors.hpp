#pragma once

#include <stdexcept>
#include <string>

namespace thm {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument value (probability out of range, k < 1, step 0, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class VocabError : public DataError {
 public:
  using DataError::DataError;
};

class LengthError : public DataError {
 public:
  using DataError::DataError;
};

/// A query row whose every key is disallowed.
class MaskError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-local normalizer evaluated to zero.
class NormalizerError : public DataError {
 public:
  using DataError::DataError;
};

/// Objective that is not reproducible under fixed seeds.
class DeterminismError : public DataError {
 public:
  using DataError::DataError;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace thm
