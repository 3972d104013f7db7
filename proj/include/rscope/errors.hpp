#pragma once

#include <stdexcept>
#include <string>

namespace rscope {

// Base for every error raised by the library. Callers that only care about
// success/failure catch this; the service maps the subclasses to HTTP codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

class InvalidToken : public Error {
public:
    using Error::Error;
};

class ContextOverflow : public Error {
public:
    using Error::Error;
};

class InvalidInjection : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace rscope
