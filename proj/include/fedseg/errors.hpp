#pragma once

#include <stdexcept>
#include <string>

namespace fedseg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Configuration and input validation.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Filesystem and serialization failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Non-finite values or failed numeric invariants.
class NumericError : public Error {
public:
    using Error::Error;
};

class ShapeMismatchError : public Error {
public:
    using Error::Error;
};

// --- learner ---

class NonFiniteActivationError : public NumericError {
public:
    using NumericError::NumericError;
};

class NonFiniteGradientError : public NumericError {
public:
    using NumericError::NumericError;
};

// --- geometry ---

class EmptyMaskError : public Error {
public:
    using Error::Error;
};

class FullMaskError : public Error {
public:
    using Error::Error;
};

class DegenerateComponentError : public Error {
public:
    using Error::Error;
};

class TooFewPointsError : public Error {
public:
    using Error::Error;
};

// --- noise ---

class DegreeTooHighError : public Error {
public:
    using Error::Error;
};

class DuplicateIndicesError : public Error {
public:
    using Error::Error;
};

class SingularSystemError : public Error {
public:
    using Error::Error;
};

class ContourTooShortError : public Error {
public:
    using Error::Error;
};

// --- federation ---

class EmptyFederationError : public Error {
public:
    using Error::Error;
};

class WeightSimplexError : public Error {
public:
    using Error::Error;
};

class AllSamplesDegenerateError : public Error {
public:
    using Error::Error;
};

class DegenerateInputError : public Error {
public:
    using Error::Error;
};

// --- dataio ---

class NoPairsFoundError : public Error {
public:
    using Error::Error;
};

}  // namespace fedseg
