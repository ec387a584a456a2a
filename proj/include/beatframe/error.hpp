#pragma once

#include <stdexcept>
#include <string>

namespace beatframe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input could not be read or decoded.
class DecodeError : public Error {
 public:
  using Error::Error;
};

// Container or encoding we do not handle.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Tensor/array dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied value outside its documented domain.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable)
      : Error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_;
};

// Building an interpolation plan failed; carries the backend diagnostic.
class PlanError : public Error {
 public:
  PlanError(const std::string& what, bool retryable) : Error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_;
};

}  // namespace beatframe
