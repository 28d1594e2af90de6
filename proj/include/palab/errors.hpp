#pragma once

#include <stdexcept>
#include <string>

namespace palab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An index (label, token id, layer, head) is outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed user-supplied input: configs, TSV files, batches.
class InputError : public Error {
 public:
  using Error::Error;
};

// A file on disk is unreadable, truncated, or inconsistent with its manifest.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace palab
