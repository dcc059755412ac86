#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfrewrite {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied value outside its documented domain.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// The backend could not be reached. Retrying later may succeed.
class TransportError : public Error {
 public:
  using Error::Error;
};

// The backend answered, but with something that breaks the wire contract.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// A proposal step had nothing to propose (no candidates, no editable slot).
class DegenerateProposal : public Error {
 public:
  using Error::Error;
};

class CorruptModel : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public Error {
 public:
  using Error::Error;
};

// Correlation coefficient is undefined for the given input (e.g. constant).
class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

}  // namespace cfrewrite
