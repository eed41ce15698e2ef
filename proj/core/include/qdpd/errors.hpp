#pragma once

#include <stdexcept>
#include <string>

namespace qdpd {

// Shape or size disagreement between tensors / vectors.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration: bad op kind, bad hyperparameter, malformed config file.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training failure (NaN loss, NaN gradient). Message names the offender.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Rollout failure (NaN action). Message names the policy id.
struct RolloutError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Archive generation failure (e.g. zero coverage after the init budget).
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File / serialization problems.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace qdpd
