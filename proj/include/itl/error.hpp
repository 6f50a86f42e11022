#pragma once

#include <stdexcept>
#include <string>

namespace itl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensors or parameter sets whose names/shapes do not line up.
class AlignmentError : public Error {
public:
    using Error::Error;
};

/// Invalid model, schedule or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent data (labels, splits, files).
class DataError : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Checkpoint encoding/decoding failure.
class CodecError : public Error {
public:
    using Error::Error;
};

} // namespace itl
