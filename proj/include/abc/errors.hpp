#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace abc {

// Base of every error raised by the library. Each subclass names one failure
// family so callers (and the CLI exit codes) can discriminate.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A value lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A caller violated a precondition (shape mismatch, wrong spec, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (at byte offset " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class CurationError : public Error {
 public:
  using Error::Error;
};

// Raised instead of letting a NaN/Inf propagate silently.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ProbeError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace abc
