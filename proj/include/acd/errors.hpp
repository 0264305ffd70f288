#pragma once

#include <stdexcept>
#include <string>

namespace acd {

// Invalid arguments, configuration or invocation. Maps to CLI exit code 1.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed, truncated or inconsistent files and datasets. Exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite losses or other numerical breakdowns. Exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace acd
