// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace shapemoe {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape disagreement between tensors or between a tensor and a model config.
struct DimensionError : Error {
    using Error::Error;
};

// NaN/Inf escaped a computation, or a numeric contract broke.
struct NumericError : Error {
    using Error::Error;
};

// Softmax over a vector with no finite entry.
struct DegenerateDistributionError : NumericError {
    using NumericError::NumericError;
};

// Invalid configuration value (k out of range, side not divisible by 4, ...).
struct ConfigError : Error {
    using Error::Error;
};

// On-disk format violation: bad magic, version, truncation. Message names the byte offset.
struct FormatError : Error {
    using Error::Error;
};

// Checkpoint/dataset/model incompatibility (a data error, not a usage error).
struct CompatError : Error {
    using Error::Error;
};

// Rejection-sampling cap exceeded while generating a scene.
struct GenerationError : Error {
    using Error::Error;
};

// Process exit code for an error category: 1 usage/config, 2 data/format,
// 3 numeric. Shared by the CLI and by sweep child-run bookkeeping.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e)) return 3;
    if (dynamic_cast<const FormatError*>(&e)) return 2;
    if (dynamic_cast<const CompatError*>(&e)) return 2;
    if (dynamic_cast<const GenerationError*>(&e)) return 2;
    if (dynamic_cast<const DimensionError*>(&e)) return 2;
    return 1;
}

}  // namespace shapemoe
