#pragma once

#include <stdexcept>
#include <string>

namespace simmt {

// Error taxonomy, mapped to process exit codes by the CLI:
//   ConfigError -> 1, DataError -> 2, NumericError (and subtypes) -> 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or rank contract violation. A subtype of NumericError so callers that
// only distinguish exit codes can treat both uniformly.
struct DimensionError : NumericError {
  using NumericError::NumericError;
};

}  // namespace simmt
