#pragma once

#include <stdexcept>
#include <string>

namespace sem2 {

// Error taxonomy; the C API maps these onto status codes and the CLI
// onto exit codes (usage -> 1, numeric -> 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse, e.g. stepping a terminated environment.
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values detected during training or inference.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace sem2
