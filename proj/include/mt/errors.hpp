#pragma once

#include <stdexcept>
#include <string>

namespace mt {

// Base for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or rank mismatch in tensor ops. Message names the op and shapes.
struct DimensionError : Error {
    using Error::Error;
};

// API misuse (e.g. backward on a non-scalar loss).
struct ContractError : Error {
    using Error::Error;
};

// Bad input data (CLI exit code 1).
struct DataError : Error {
    using Error::Error;
};

// Malformed file content; message carries the line number.
struct ParseError : DataError {
    using DataError::DataError;
};

// Duplicate (asset, date) rows or any other point-in-time breach.
struct PitViolationError : DataError {
    using DataError::DataError;
};

// Too few assets survive panel alignment.
struct UniverseError : DataError {
    using DataError::DataError;
};

// Insufficient history / out-of-range request.
struct RangeError : DataError {
    using DataError::DataError;
};

// CPD join keyed on unknown (asset, date).
struct JoinError : DataError {
    using DataError::DataError;
};

// A model variant requests features the frame does not carry.
struct FeatureError : DataError {
    using DataError::DataError;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Kernel matrix not SPD even after jitter escalation.
struct SingularKernelError : NumericError {
    using NumericError::NumericError;
};

// Metric has no defined value on this series (rendered as "n/a" in reports).
struct MetricUndefinedError : Error {
    using Error::Error;
};

// Bad run configuration (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : DataError {
    using DataError::DataError;
};

} // namespace mt
