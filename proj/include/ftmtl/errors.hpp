#pragma once

#include <stdexcept>
#include <string>

namespace ftmtl {

// Error taxonomy mirrors the CLI exit-code contract:
// 2 usage, 3 I/O, 4 numerical abort, 5 version, 6 data mismatch.

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ftmtl
