#pragma once

#include <stdexcept>
#include <string>

namespace modprec {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad input: shape mismatch, broken precondition, non-symmetric matrix, ...
struct ValidationError : Error {
    using Error::Error;
};

/// A numerical routine failed (non-convergence, singular system, ...).
struct NumericalError : Error {
    using Error::Error;
};

/// Invalid configuration (unknown key, non-power-of-two window, ...).
struct ConfigError : Error {
    using Error::Error;
};

/// Operation called in the wrong state (premature finalize, over-accumulation).
struct StateError : Error {
    using Error::Error;
};

/// Task evaluation failure (non-finite loss, bad sample).
struct TaskError : Error {
    using Error::Error;
};

} // namespace modprec
