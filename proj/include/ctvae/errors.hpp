#pragma once

#include <stdexcept>
#include <string>

namespace ctvae {

// Shape mismatch between tensors; message names the op and both shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A precondition of an operation was violated.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (losses, gradients).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input data (corpus files, line-level parse failures).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint version/integrity/compatibility failures.
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training stopped because the loss went non-finite.
struct TrainingDiverged : std::runtime_error {
    std::string last_good_checkpoint;
    TrainingDiverged(const std::string& msg, std::string last_good)
        : std::runtime_error(msg), last_good_checkpoint(std::move(last_good)) {}
};

}  // namespace ctvae
