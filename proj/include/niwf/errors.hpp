#pragma once

#include <stdexcept>
#include <string>

namespace niwf {

// Base for all library errors. The CLI maps subtypes to distinct exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches. Message names the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Violated operation precondition (bad argument, wrong call order, invalid input id).
struct ContractError : Error {
    using Error::Error;
};

// Unknown key: missing region id, unregistered module, absent checkpoint entry.
struct LookupError : Error {
    using Error::Error;
};

// Configuration parsing / validation failures.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Checkpoint loading failures, kept distinct so callers can tell them apart.
struct ChecksumError : IoError {
    using IoError::IoError;
};
struct VersionError : IoError {
    using IoError::IoError;
};
struct TruncatedError : IoError {
    using IoError::IoError;
};

}  // namespace niwf
