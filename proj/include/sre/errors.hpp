#pragma once

#include <stdexcept>
#include <string>

namespace sre {

// Exit-code contract: ConfigError family -> 2, NumericError -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : ConfigError {
    explicit ShapeError(const std::string& msg) : ConfigError(msg) {}
};

struct LabelError : ConfigError {
    explicit LabelError(const std::string& msg) : ConfigError(msg) {}
};

struct CoverageError : ConfigError {
    explicit CoverageError(const std::string& msg) : ConfigError(msg) {}
};

struct IoError : ConfigError {
    explicit IoError(const std::string& msg) : ConfigError(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sre
