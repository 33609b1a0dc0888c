#pragma once

#include <stdexcept>
#include <string>

namespace dq {

// Configuration / validation problems (CLI maps these to exit code 2).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File / stream problems (CLI maps these to exit code 3).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dq
