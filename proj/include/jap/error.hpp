#pragma once

#include <stdexcept>
#include <string>

namespace jap {

/// Rejected input or configuration. Raised before any numerical work starts.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Numerical failure during estimation.
class ComputationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A design matrix that is rank deficient at the working condition-number threshold.
class SingularDesign : public ComputationError {
public:
    using ComputationError::ComputationError;
};

/// An iterative solver that ran out of iterations.
class ConvergenceError : public ComputationError {
public:
    using ComputationError::ComputationError;
};

} // namespace jap
