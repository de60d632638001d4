#pragma once

#include <stdexcept>
#include <string>

namespace seprod {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Image reference the model's environment cannot resolve.
class ContextError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition of the model contract (vocabulary mismatch,
// empty continuation, out-of-range token).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class DegenerateDistribution : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed structured tail in a search-model turn.
class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Transport failure after the retry budget is spent.
class BackendError : public Error {
 public:
  using Error::Error;
};

// Backend reachable but missing a required feature (echo scoring, logprobs).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Trace line that does not match the documented schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace seprod
