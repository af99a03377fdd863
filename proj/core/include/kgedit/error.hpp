#pragma once

#include <stdexcept>
#include <string>

namespace kgedit {

// Root of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (non-scalar loss, missing
// gradient for a registered target, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Serialized artifact is corrupt, truncated, or has an unexpected version.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A metric is undefined for its inputs (empty set, zero denominator).
class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace kgedit
