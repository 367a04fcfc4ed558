#pragma once

#include <stdexcept>
#include <string>

namespace sparsyfed {

/// Invalid configuration or shape mismatch detected before any work is done.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller broke an API precondition (stale trace, out-of-range round, ...).
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite value produced during training. The message carries round/client
/// context once the federation loop has annotated it.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace sparsyfed
