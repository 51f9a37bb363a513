#pragma once

#include <stdexcept>
#include <string>

namespace ushl {

/// Violated precondition: shape mismatch, bad argument, misuse of an API.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A primitive produced NaN or Inf, or an optimizer step saw non-finite input.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration file or flag could not be interpreted.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Base class for everything that goes wrong while reading a corpus.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFileError : public LoadError {
 public:
  using LoadError::LoadError;
};

class ShapeError : public LoadError {
 public:
  using LoadError::LoadError;
};

class ChecksumError : public LoadError {
 public:
  using LoadError::LoadError;
};

class FormatError : public LoadError {
 public:
  using LoadError::LoadError;
};

}  // namespace ushl
