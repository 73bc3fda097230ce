#pragma once

#include <stdexcept>
#include <string>

namespace mmpt {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch the whole family at the CLI boundary.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad caller-supplied value (counts, ranges, unknown enum values, ...).
struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& msg) : Error(msg) {}
};

// A point cloud that violates its invariants (non-finite coordinates, empty).
struct InvalidCloud : InvalidArgument {
    explicit InvalidCloud(const std::string& msg) : InvalidArgument(msg) {}
};

// Incompatible tensor shapes.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf tripwire or a numerically failed computation.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Operation not valid in the current object state (e.g. double backward).
struct InvalidState : Error {
    explicit InvalidState(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace mmpt
