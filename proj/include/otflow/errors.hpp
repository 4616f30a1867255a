#pragma once

#include <stdexcept>

namespace otflow {

// Error taxonomy mirrors the CLI exit-code contract:
// validation failures exit 1, numeric failures 2, I/O failures 3.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace otflow
