// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lora_audit {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or layer dimensions do not compose.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A precondition on argument values was violated.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A file was readable but its contents do not follow the expected layout.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// The input is well-formed but mathematically degenerate (e.g. a zero-norm operand).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// An adapter was requested on a layer that cannot host one.
class PlacementError : public Error {
public:
    using Error::Error;
};

}  // namespace lora_audit
