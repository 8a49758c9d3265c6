#pragma once

#include <stdexcept>
#include <string>

namespace owps {

enum class ErrorKind {
    InvalidShape,
    ShapeMismatch,
    Domain,
    InvalidConfig,
    Io,
    Corrupt,
    Incompatible,
    State,
    Diverged,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; `kind()` lets callers branch without
// string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace owps
