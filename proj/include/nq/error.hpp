#pragma once

#include <stdexcept>
#include <string>

namespace nq {

// Base class for failures that the command-line front end maps to an exit
// status. Contract violations by callers (bad lengths, out-of-range
// arguments) are reported with std::invalid_argument instead.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// Malformed or inconsistent serialized data.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

// A compression / entropy target that could not be met.
class InfeasibleError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

// Divergence, non-finite loss or curvature.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

}  // namespace nq
