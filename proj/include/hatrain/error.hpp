#pragma once

#include <stdexcept>
#include <string>

namespace hat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or model shapes do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Differentiation requested through a node that is not connected to any parameter.
class GraphError : public Error {
public:
    using Error::Error;
};

/// Malformed file header, payload, or CSV schema.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Precondition on an argument violated (out-of-range id, bad config value).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Training or estimation produced non-finite values it cannot recover from.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace hat
