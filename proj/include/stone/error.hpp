#pragma once

#include <stdexcept>
#include <string>

namespace stone {

/// Bad configuration or command-line input.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing, unreadable or malformed data (audio, manifests, checkpoints).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a degenerate model.
class CollapseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace stone
