#pragma once

#include <stdexcept>
#include <string>

namespace petsynth {

// Bad input values, violated preconditions, numerical failures. CLI exit code 1.
class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File-system and configuration failures. CLI exit code 2.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class FormatErrorKind { BadMagic, TruncatedPayload, DimOverflow, Malformed };

// Binary container decoding failure. Treated as an I/O error by the CLI.
class FormatError : public IoError {
public:
    FormatError(FormatErrorKind kind, const std::string &what) : IoError(what), kind_(kind) {}
    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

} // namespace petsynth
