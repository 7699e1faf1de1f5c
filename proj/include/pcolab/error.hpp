// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace pcolab {

/// Machine-readable error categories; the CLI maps each to an exit code.
enum class ErrorKind {
    shape,
    numeric,
    config,
    missing_artifact,
    io,
    data,
    invalid_argument,
};

inline const char* to_string(ErrorKind k) noexcept {
    switch (k) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::config: return "config";
        case ErrorKind::missing_artifact: return "missing_artifact";
        case ErrorKind::io: return "io";
        case ErrorKind::data: return "data";
        case ErrorKind::invalid_argument: return "invalid_argument";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) {
        throw Error(kind, msg);
    }
}

}  // namespace pcolab
