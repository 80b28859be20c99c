#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace debias {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A tensor or layer shape does not match what the operation expects.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An argument is outside its documented domain.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Training produced non-finite parameters.
class DivergenceError : public Error {
public:
    DivergenceError(std::string what, std::size_t iteration)
        : Error(std::move(what)), iteration_(iteration) {}

    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

/// A persisted file could not be read back.
class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace debias
