#pragma once

#include <stdexcept>
#include <string>

namespace fdibench {

/// Base of every error thrown by the library. `exit_code()` maps the error
/// onto the CLI exit-code convention (2 config, 3 numerical, 4 I/O).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const { return 3; }
};

/// Dimension mismatch or violated precondition on an operation's inputs.
class ContractViolation : public Error {
public:
    using Error::Error;
};

/// Non-finite or otherwise invalid state vector.
class InvalidState : public Error {
public:
    using Error::Error;
};

/// Numerical breakdown inside a filter or a model (singular matrix,
/// non-finite Jacobian, non-finite gradient, ...).
class NumericalFailure : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 2; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 4; }
};

/// Raised by threshold calibration when the requested false-alarm rate cannot
/// be met on the corpus.
class InfeasibleCalibration : public Error {
public:
    InfeasibleCalibration(const std::string& what, double achieved_rate)
        : Error(what), achieved_rate_(achieved_rate) {}
    double achieved_rate() const { return achieved_rate_; }

private:
    double achieved_rate_;
};

}  // namespace fdibench
