#pragma once

#include <stdexcept>
#include <string>

namespace crce {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input value or precondition violation (empty target, unknown label, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed file or payload. `where` carries a line number or a field path.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::string where = {})
        : Error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}

    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or gradient during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Failure talking to a remote service (LLM, VLM judge).
class TransportError : public Error {
public:
    TransportError(const std::string& what, int attempts = 1, double retry_after_s = 0.0)
        : Error(what), attempts_(attempts), retry_after_s_(retry_after_s) {}

    int attempts() const noexcept { return attempts_; }
    double retry_after_seconds() const noexcept { return retry_after_s_; }

private:
    int attempts_;
    double retry_after_s_;
};

} // namespace crce
