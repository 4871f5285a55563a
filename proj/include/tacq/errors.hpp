#pragma once

#include <stdexcept>
#include <string>

namespace tacq {

// Bad user input: config files, CLI values, malformed containers.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure inside an algorithm (non-finite statistics, divergence).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace tacq
