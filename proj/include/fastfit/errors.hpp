#pragma once

#include <stdexcept>
#include <string>

namespace fastfit {

// Shape or length mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by a kernel, or a softmax row with no admissible entry.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid argument that is not a shape problem (unknown category, bad step index, ...).
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent configuration / file contents.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace fastfit
