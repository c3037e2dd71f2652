#pragma once

#include <stdexcept>
#include <string>

namespace lsc {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatches, sequence-length violations.
struct ShapeError : Error {
    using Error::Error;
};

// Precondition violations: bad labels, empty batches, wrong call order.
struct ContractError : Error {
    using Error::Error;
};

// Invalid run / model / adapter configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input files (CoNLL / CSV parse and schema problems).
struct DataError : Error {
    using Error::Error;
};

// Corrupt, truncated, or incompatible checkpoint files.
struct CheckpointError : Error {
    using Error::Error;
};

// Training loss became NaN.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace lsc
