// SPDX-License-Identifier: Apache-2.0
//
// Exception taxonomy shared by all modules.

#pragma once

#include <stdexcept>
#include <string>

namespace clearair {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A value failed a type invariant (shape lists, ranges, partitions, ...).
struct ValidationError : Error {
    using Error::Error;
};

// Config file could not be parsed or names an unknown/malformed key.
struct ConfigError : Error {
    using Error::Error;
};

// Tensor/feature-map dimensions are incompatible for an operation.
struct ShapeError : Error {
    using Error::Error;
};

// Out-of-range operator parameter (negative sigma, t outside [0,1], ...).
struct ParameterError : Error {
    using Error::Error;
};

// A guidance provider could not serve a request (missing id, bad artifact).
struct ProviderError : Error {
    using Error::Error;
};

// A required guidance component is absent for an enabled injection point.
struct GuidanceError : Error {
    using Error::Error;
};

// Dataset-level problems (empty source dir, empty manifest).
struct DatasetError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Checkpoint version/config mismatch.
struct CheckpointError : Error {
    using Error::Error;
};

// Checkpoint payload failed its checksum or is truncated.
struct IntegrityError : Error {
    using Error::Error;
};

struct TrainingError : Error {
    using Error::Error;
};

struct MetricError : Error {
    using Error::Error;
};

// Augmentation policy contains an op outside the photometric family.
struct PolicyError : Error {
    using Error::Error;
};

} // namespace clearair
