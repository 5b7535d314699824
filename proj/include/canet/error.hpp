#pragma once

#include <stdexcept>
#include <string>

namespace canet {

// Root of every error thrown by the library. The CLI turns these into a
// one-line diagnostic and a nonzero exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class DecodeError : public IoError {
public:
    using IoError::IoError;
};

class TrainingAborted : public Error {
public:
    using Error::Error;
};

}  // namespace canet
