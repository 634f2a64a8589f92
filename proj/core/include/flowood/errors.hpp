#pragma once

#include <stdexcept>
#include <string>

namespace flowood {

// Invalid arguments, bad configuration, malformed input files. The CLI maps
// these to exit code 2.
class ValueError : public std::runtime_error {
public:
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape violations.
class ShapeError : public ValueError {
public:
    explicit ShapeError(const std::string& msg) : ValueError(msg) {}
};

// Filesystem and decode failures.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses, failed numeric preconditions at runtime. Exit code 1.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace flowood
