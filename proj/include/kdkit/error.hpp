#pragma once

#include <stdexcept>
#include <string>

namespace kd {

// Shape/extent disagreements between tensors or between a tensor and an op.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A value outside the domain an operation accepts (bad kernel size, negative
// temperature, out-of-range label, invalid axis, ...).
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller broke an API contract that is not a shape or value problem
// (e.g. backward on a tensor that is not on a tape, trainable teacher).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed configuration file or command line.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace kd
