#pragma once

#include <stdexcept>
#include <string>

namespace a2fpn {

// Base class for every error this library throws. The subclasses map onto
// process exit codes: usage/config -> 1, data/format -> 2.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor extents. Messages name both shapes involved.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid configuration: bad extents for a layer, non-square TTA input,
// overlapping corpus seed ranges, checkpoint/config mismatch, ...
class ConfigError : public Error {
public:
    using Error::Error;
};

// API misuse: non-scalar loss, tape reuse after backward, ...
class UsageError : public Error {
public:
    using Error::Error;
};

// Bad data at runtime: out-of-range class labels, diverged training.
class DataError : public Error {
public:
    using Error::Error;
};

// Malformed file contents (raster headers, manifests, checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

// An attention denominator collapsed below the guard threshold.
class DegenerateKernelError : public Error {
public:
    using Error::Error;
};

// A benchmark configuration would allocate beyond the configured cap.
class CapacityError : public Error {
public:
    using Error::Error;
};

// Exit code taxonomy shared by the CLI and the selftest report.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitData = 2,
    kExitPropertyFailure = 3,
};

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitUsage;
    if (dynamic_cast<const UsageError*>(&e) != nullptr) return kExitUsage;
    if (dynamic_cast<const DataError*>(&e) != nullptr) return kExitData;
    if (dynamic_cast<const FormatError*>(&e) != nullptr) return kExitData;
    return kExitData;
}

}  // namespace a2fpn
