#pragma once

#include <stdexcept>
#include <string>

namespace snipforge {

// Root of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced by a forward op, or a non-finite objective.
class NumericError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

// Input that admits no meaningful answer, e.g. a fully masked softmax row.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

// Sentence cache built from a different coarse checkpoint than the one serving.
class StaleCacheError : public Error {
public:
    using Error::Error;
};

}  // namespace snipforge
