#pragma once

#include <stdexcept>
#include <string>

namespace kervolve {

/// Invalid configuration or API misuse (bad shapes, bad flags, missing cache).
/// Maps to CLI exit code 1.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or unreadable input data (IDX files, record files).
/// Maps to CLI exit code 2.
struct format_error : std::runtime_error {
    explicit format_error(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values produced where finite ones are required.
/// Maps to CLI exit code 3.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace kervolve
