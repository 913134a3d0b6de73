#pragma once

#include <stdexcept>
#include <string>

namespace spikecalib {

// Exit-code families used by the command-line tool.
enum class ErrorKind { usage = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

// Tensor shapes that do not compose.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Malformed or mismatched files (truncation, version, digest).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class DigestError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncationError : public FormatError {
public:
    using FormatError::FormatError;
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

}  // namespace spikecalib
