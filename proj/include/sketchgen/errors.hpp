#pragma once

#include <stdexcept>
#include <string>

namespace sketchgen {

// Error taxonomy. Each class maps to a distinct process exit code in the CLI
// (see exit_code_for): configuration/usage problems, I/O and parse failures,
// and numerical aborts are distinguishable by callers and scripts.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension or size mismatch between values that must agree.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Out-of-range or otherwise invalid runtime input (e.g. token index > K).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed file contents (bad header, truncated payload).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (NaN loss, NaN logits).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitIo = 3,
    kExitNumeric = 4,
};

}  // namespace sketchgen
