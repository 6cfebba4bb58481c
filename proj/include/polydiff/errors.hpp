#pragma once

#include <stdexcept>
#include <string>

// Typed errors so the CLI can map failures to stable exit codes:
//   config=2, missing file=3, stage mismatch=4, numeric=5, anything else=1.

namespace polydiff {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct MissingFileError : std::runtime_error {
    explicit MissingFileError(const std::string& m) : std::runtime_error(m) {}
};

struct StageMismatchError : std::runtime_error {
    explicit StageMismatchError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace polydiff
