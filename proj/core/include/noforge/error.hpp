#pragma once

#include <stdexcept>
#include <string>

namespace noforge {

// Base class for all library errors. Subclasses map onto the CLI exit-code
// categories: usage (1), data (2), numerical (3).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape / construction errors
class InvalidShape : public Error {
public:
    using Error::Error;
};
class ShapeMismatch : public Error {
public:
    using Error::Error;
};
class InvalidConfig : public Error {
public:
    using Error::Error;
};
class InvalidInput : public Error {
public:
    using Error::Error;
};

// Contract errors
class ContractViolation : public Error {
public:
    using Error::Error;
};
class EmptyMask : public Error {
public:
    using Error::Error;
};

// Numerical failures
class NonFiniteGradient : public Error {
public:
    using Error::Error;
};

// Data / IO failures
class CorruptData : public Error {
public:
    using Error::Error;
};
class CorruptCheckpoint : public Error {
public:
    using Error::Error;
};
class IncompatibleCheckpoint : public Error {
public:
    using Error::Error;
};
class UnknownSample : public Error {
public:
    using Error::Error;
};
class IOFailure : public Error {
public:
    using Error::Error;
};

} // namespace noforge
