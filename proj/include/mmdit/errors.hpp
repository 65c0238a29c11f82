#pragma once

#include <stdexcept>
#include <string>

namespace mmdit {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// dimension / extent mismatch, names both shapes in the message
struct ShapeError : Error {
    using Error::Error;
};

// invalid argument value (eps <= 0, zero counts, duplicate positions, ...)
struct ParamError : Error {
    using Error::Error;
};

// value outside the operation's domain (non-binary mask, t outside [0,1])
struct DomainError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar loss, empty text sequence)
struct UsageError : Error {
    using Error::Error;
};

// non-finite value where the contract requires finite
struct NumericalError : Error {
    using Error::Error;
};

// training aborted (non-finite loss), message carries the step index
struct TrainingError : Error {
    using Error::Error;
};

// checkpoint / archive container problems (bad magic, version mismatch)
struct FormatError : Error {
    using Error::Error;
};

// a task whose loss region is empty (all-zero loss weights)
struct DegenerateTaskError : Error {
    using Error::Error;
};

}  // namespace mmdit
