#pragma once

#include <stdexcept>
#include <string>

namespace beatkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up (matmul inner dims, broadcast failures, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class DegenerateSliceError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: annotations, file contents, manifests.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

// NaN / +inf produced by an operation, or training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace beatkit
