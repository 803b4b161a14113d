#pragma once

#include <stdexcept>
#include <string>

namespace pivoflow {

// Artifact file problems, tagged so callers (and tests) can tell them apart.
class IoError : public std::runtime_error {
public:
    enum class Kind {
        MissingFile,
        VersionMismatch,
        ChecksumMismatch,
        ShapeMismatch,
        Malformed,
        WriteFailed
    };

    IoError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Non-finite state, diverged integration step, non-finite training loss.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A pipeline stage was invoked before the artifacts it consumes exist.
class PrereqError : public std::runtime_error {
public:
    explicit PrereqError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pivoflow
