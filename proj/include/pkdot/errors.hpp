#pragma once

#include <stdexcept>
#include <string>

namespace pkdot {

// Shape disagreement between operands (reported with both shapes).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Value outside an operation's domain (div by zero, log of non-positive,
// non-finite result), reported with the offending index where known.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke an API precondition (non-scalar backward root, k out of range, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Input that makes the requested quantity undefined (all-zero embedding row).
struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content, reported with line number.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid experiment configuration (unknown key, wrong type, missing section).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure writing or reading artifacts.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace pkdot
