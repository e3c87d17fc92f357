#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mole {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed edge-list input. Carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Input that parses but does not describe a valid multilayer network.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// Argument outside an operation's domain (unknown node, bad parameter).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Caller broke an interface contract (shape mismatch, unfrozen expert).
class ContractError : public Error {
public:
    using Error::Error;
};

class SamplingError : public Error {
public:
    SamplingError(const std::string& what, std::size_t shortfall)
        : Error(what), shortfall_(shortfall) {}
    std::size_t shortfall() const noexcept { return shortfall_; }

private:
    std::size_t shortfall_;
};

class CalibrationError : public Error {
public:
    using Error::Error;
};

/// Optimization produced non-finite values.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// A stage exceeded its wall-clock budget.
class StageTimeout : public Error {
public:
    using Error::Error;
};

}  // namespace mole
