#pragma once

// Exception types shared by every dabmod module.

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dabmod {

/// Input violates a documented type invariant or precondition.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Vector/matrix shapes do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A switching edge does not land on a sampling-grid point.
class EdgeAlignmentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Lossless circuit driven with a nonzero mean voltage has no periodic solution.
class DegenerateDriveError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reference integrator failed to close the periodic orbit.
class OracleDivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Waveform does not wrap around within tolerance.
class NonPeriodicError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingDivergedError : public std::runtime_error {
public:
    TrainingDivergedError(const std::string& what, std::size_t epoch)
        : std::runtime_error(what), epoch_(epoch) {}
    [[nodiscard]] std::size_t epoch() const { return epoch_; }

private:
    std::size_t epoch_;
};

class RolloutDivergedError : public std::runtime_error {
public:
    RolloutDivergedError(const std::string& what, std::size_t step)
        : std::runtime_error(what), step_(step) {}
    [[nodiscard]] std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

}  // namespace dabmod
