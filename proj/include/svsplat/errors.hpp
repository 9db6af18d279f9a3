#pragma once

#include <stdexcept>
#include <string>

namespace svsplat {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// File could not be opened, written, or fully read.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Malformed container file (bad magic, truncated payload, unknown dtype, ...).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// A required input file is absent; the message names the file.
class MissingInput : public Error {
public:
    explicit MissingInput(const std::string& msg) : Error(msg) {}
};

// Input values violate a documented precondition.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Tensor extents do not match the operation's contract.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Configuration is internally inconsistent or incompatible with the data.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// An operation was invoked without the state it depends on.
class StateError : public Error {
public:
    explicit StateError(const std::string& msg) : Error(msg) {}
};

// Bad command-line usage; maps to process exit code 2.
class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

} // namespace svsplat
