#pragma once

#include <stdexcept>
#include <string>

namespace i2a {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Adapter/shape wiring problems (wrong latent shape, schedule mismatch, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Bad caller-supplied values (labels out of range, mismatched image shapes, ...).
struct InputError : Error {
    using Error::Error;
};

// Non-finite values, invalid schedules at runtime.
struct NumericError : Error {
    using Error::Error;
};

// Network failures after retries are exhausted.
struct TransportError : Error {
    using Error::Error;
};

// Malformed responses from external services or malformed files.
struct ParseError : Error {
    using Error::Error;
};

// A service answered but produced unusable content (e.g. an empty caption).
struct GenerationError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InputError(msg);
}

inline void require_config(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace i2a
