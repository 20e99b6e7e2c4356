#pragma once

#include <stdexcept>
#include <string>

namespace evtrack {

// Malformed input files, out-of-range coordinates, bad configs.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape mismatches and other contract violations of the math kernels.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values during training or gradient checking.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace evtrack
