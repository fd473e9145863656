#pragma once

#include <stdexcept>
#include <string>

namespace pvess {

// Raised when a caller breaks a documented precondition (e.g. stepping a
// device with an un-clamped action).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Raised for malformed external input: config files, CSV series, reports.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pvess
