#pragma once

#include <stdexcept>
#include <string>

namespace l3p {

// Error categories map onto CLI exit codes: usage 2, data 3, numeric 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

class UsageError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

class ShapeError : public NumericError {
public:
    using NumericError::NumericError;
};

// Checkpoint format failures. Each condition has its own type so callers can
// tell a foreign file from a damaged one.
class FormatError : public DataError {
public:
    using DataError::DataError;
};

class BadMagicError : public FormatError {
public:
    BadMagicError() : FormatError("not an L3P checkpoint") {}
};

class TruncatedError : public FormatError {
public:
    explicit TruncatedError(const std::string& what)
        : FormatError("truncated checkpoint: " + what) {}
};

class ChecksumError : public FormatError {
public:
    ChecksumError() : FormatError("checkpoint checksum mismatch") {}
};

}  // namespace l3p
