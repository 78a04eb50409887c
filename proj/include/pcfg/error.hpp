#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pcfg {

using Address = std::uint64_t;

std::string hex(Address a);

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedImage : public Error {
 public:
  explicit MalformedImage(const std::string& reason)
      : Error("malformed image: " + reason) {}
};

class OutOfRange : public Error {
 public:
  explicit OutOfRange(Address a)
      : Error("address outside text: " + hex(a)), addr(a) {}
  Address addr;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidGraph : public Error {
 public:
  using Error::Error;
};

// Operation precondition failures.
class NotACandidate : public Error {
 public:
  explicit NotACandidate(Address t) : Error("not a candidate: " + hex(t)) {}
};

class NotDirectTerminator : public Error {
 public:
  explicit NotDirectTerminator(Address b)
      : Error("block has no direct terminator: " + hex(b)) {}
};

class NotIndirectTerminator : public Error {
 public:
  explicit NotIndirectTerminator(Address b)
      : Error("block has no indirect terminator: " + hex(b)) {}
};

class EdgeNotFound : public Error {
 public:
  using Error::Error;
};

/// Raised by op_cfec when the callee's status is still UNSET; the caller
/// defers the call fall-through edge.
class CalleeUnset : public Error {
 public:
  explicit CalleeUnset(Address callee)
      : Error("callee return status unset: " + hex(callee)) {}
};

class AlreadySet : public Error {
 public:
  explicit AlreadySet(Address entry)
      : Error("return status already set: " + hex(entry)) {}
};

class SpecOutOfBounds : public Error {
 public:
  using Error::Error;
};

class PhaseViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace pcfg
