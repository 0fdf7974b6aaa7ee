#pragma once

#include <stdexcept>
#include <string>

namespace advspde {

/// Failure categories surfaced by the library. The CLI maps them onto exit codes.
enum class ErrorKind {
    InvalidDomain,
    OutOfDomain,
    InvalidParameter,
    InvalidCall,
    UnsupportedExponent,
    DimensionMismatch,
    NotSpd,
    Factorization,
    Convergence,
    InvalidInterval,
    Resource,
    Config,
    Data,
    DegenerateData,
    EmptyData,
    Init,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Raised by a factorization that meets a non-positive pivot.
class NotSpdError : public Error {
public:
    NotSpdError(const std::string& message, long pivot)
        : Error(ErrorKind::NotSpd, message), pivot_(pivot) {}

    long pivot() const noexcept { return pivot_; }

private:
    long pivot_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace advspde
