#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace logo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or geometry.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity where finite input is required.
class NumericInputError : public Error {
 public:
  using Error::Error;
};

// Violated precondition (bad argument, scalar expected, negative weight...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Tensor from a foreign tape, recording on a frozen tape, etc.
class TapeError : public Error {
 public:
  using Error::Error;
};

// Window extents that do not tile the clip geometry.
class WindowSpecError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed checkpoint. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace logo
