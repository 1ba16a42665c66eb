#pragma once

#include <stdexcept>
#include <string>

namespace fedgrid {

// Invalid arguments: shape mismatch, non-finite input, out-of-domain values.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Call-order violations: stale caches, stepping a finished episode, sampling
// an empty buffer.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient; the offending update was not applied.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed config, checkpoint or scenario file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedgrid
