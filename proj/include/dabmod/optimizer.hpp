#pragma once

// =============================================================================
// Modulation-parameter search
// =============================================================================
// Candidates are vectors over the strategy's active ratios. Every candidate is
// snapped to the evaluator's sampling grid (inside the search bounds) before
// evaluation, and the snapped modulation is what results report.
//
// Fitness (lower is better):
//   objective(metrics) + penalty_weight * max(0, |p_avg - P*| / P* - tol)^2
// with objective i_pp / i_base, i_rms / i_base or 1 - zvs_fraction, and
// i_base = P* / v_out.
// =============================================================================

#include "dabmod/dab_physics.hpp"
#include "dabmod/surrogate.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dabmod::optimizer {

using physics::ConverterParams;
using physics::ModulationParams;
using physics::PerformanceMetrics;
using physics::SamplingGrid;
using physics::Strategy;
using surrogate::OperatingPoint;

// =============================================================================
// Problem definition
// =============================================================================

enum class Goal { MinCurrentStress, MinRmsCurrent, MaxZvsRange };

[[nodiscard]] std::string_view to_string(Goal g);
/// Accepts "min_current_stress", "min_rms_current", "max_zvs_range".
[[nodiscard]] Goal goal_from_string(std::string_view s);

/// Bounds on the modulation ratios. Active dimensions follow the strategy:
/// SPS [d0], EPS [d0, d1] with d2 = 1, DPS [d0, d] with d1 = d2 = d,
/// TPS [d0, d1, d2].
struct SearchSpace {
    Strategy strategy = Strategy::TPS;
    double d0_min = 0.0;
    double d0_max = 0.5;
    double d_min = 0.1;
    double d_max = 1.0;

    [[nodiscard]] static SearchSpace for_strategy(Strategy s, double d_min = 0.1);

    [[nodiscard]] std::size_t dimensions() const;
    [[nodiscard]] std::vector<double> lower() const;
    [[nodiscard]] std::vector<double> upper() const;
    [[nodiscard]] ModulationParams to_modulation(const std::vector<double>& x) const;
    [[nodiscard]] std::vector<double> from_modulation(const ModulationParams& mp) const;

    /// Rounds every active ratio to the grid, staying inside the bounds.
    /// Throws ValidationError if a bound interval holds no grid point.
    [[nodiscard]] ModulationParams snap(const ModulationParams& mp, const SamplingGrid& grid) const;

    void validate() const;
};

struct ObjectiveSpec {
    Goal goal = Goal::MinCurrentStress;
    double target_power = 200.0;    ///< [W]
    double power_tolerance = 0.01;  ///< relative
    double penalty_weight = 100.0;

    /// Target in (0, p_rated], tolerance >= 0, penalty weight > 0.
    void validate(const ConverterParams& cp) const;
};

// =============================================================================
// Evaluators
// =============================================================================

/// Raised when an evaluator fails; carries the offending candidate.
class CandidateEvaluationError : public std::runtime_error {
public:
    CandidateEvaluationError(const std::string& what, OperatingPoint candidate)
        : std::runtime_error(what), candidate_(std::move(candidate)) {}
    [[nodiscard]] const OperatingPoint& candidate() const { return candidate_; }

private:
    OperatingPoint candidate_;
};

/// Maps (converter, operating point) to performance metrics. Results are
/// memoized per converter and point, and copies share the cache. Candidates
/// must lie on the evaluator's grid. Not thread-safe.
class Evaluator {
public:
    using BatchFunction =
        std::function<std::vector<PerformanceMetrics>(const ConverterParams&, const std::vector<OperatingPoint>&)>;

    Evaluator(std::string tag, SamplingGrid grid, BatchFunction fn);

    /// Closed-form steady state on `grid`.
    [[nodiscard]] static Evaluator oracle(const SamplingGrid& grid);
    /// Batched closed-loop rollouts of a trained pair on its own grid.
    [[nodiscard]] static Evaluator surrogate(std::shared_ptr<const surrogate::SurrogatePair> pair);

    [[nodiscard]] const std::string& tag() const { return tag_; }
    [[nodiscard]] const SamplingGrid& grid() const { return grid_; }

    [[nodiscard]] PerformanceMetrics evaluate(const ConverterParams& cp, const OperatingPoint& op) const;
    [[nodiscard]] std::vector<PerformanceMetrics> evaluate(const ConverterParams& cp,
                                                           const std::vector<OperatingPoint>& ops) const;

    /// Points requested so far, and how many of them missed the cache.
    [[nodiscard]] std::size_t requests() const { return state_->requests; }
    [[nodiscard]] std::size_t computed() const { return state_->computed; }

private:
    using Key = std::array<double, 10>;
    struct State {
        std::map<Key, PerformanceMetrics> cache;
        std::size_t requests = 0;
        std::size_t computed = 0;
    };

    std::string tag_;
    SamplingGrid grid_;
    BatchFunction fn_;
    std::shared_ptr<State> state_;
};

[[nodiscard]] double objective_value(const PerformanceMetrics& m, const ObjectiveSpec& obj, const ConverterParams& cp);
[[nodiscard]] double power_penalty(const PerformanceMetrics& m, const ObjectiveSpec& obj);
[[nodiscard]] double fitness(const PerformanceMetrics& m, const ObjectiveSpec& obj, const ConverterParams& cp);
[[nodiscard]] bool power_feasible(const PerformanceMetrics& m, const ObjectiveSpec& obj);

/// Fitness of one candidate at the converter's own dc-link voltages.
[[nodiscard]] double evaluate_candidate(const Evaluator& ev, const ConverterParams& cp, const ModulationParams& mp,
                                        const ObjectiveSpec& obj);

// =============================================================================
// Box-constrained minimizers
// =============================================================================

using Point = std::vector<double>;
/// Fitness of every point in a batch.
using BatchObjective = std::function<std::vector<double>(const std::vector<Point>&)>;

struct Box {
    Point lower;
    Point upper;

    [[nodiscard]] std::size_t dimensions() const { return lower.size(); }
    void validate() const;
};

struct PsoConfig {
    std::size_t swarm_size = 40;
    std::size_t iterations = 150;
    double inertia = 0.72;
    double cognitive = 1.49;
    double social = 1.49;
    std::uint64_t seed = 0;

    void validate() const;
};

struct GaConfig {
    std::size_t population = 40;
    std::size_t generations = 150;
    std::size_t tournament = 2;
    double crossover_probability = 0.9;
    double crossover_eta = 15.0;
    double mutation_eta = 20.0;
    double mutation_probability = 0.0;  ///< per gene; 0 means 1 / dimensions
    std::size_t elites = 2;
    std::uint64_t seed = 0;

    void validate() const;
};

struct MinimizeResult {
    Point best;
    double best_fitness = 0.0;
    std::vector<double> history;  ///< best fitness after initialization and each iteration
    std::size_t evaluations = 0;
};

/// Global-best particle swarm with reflecting bounds. `initial` positions,
/// if any, replace the first random particles.
[[nodiscard]] MinimizeResult pso_minimize(const Box& box, const BatchObjective& f, const PsoConfig& cfg,
                                          const std::vector<Point>& initial = {});

/// Generational GA with tournament selection, SBX crossover, polynomial
/// mutation and elitism.
[[nodiscard]] MinimizeResult ga_minimize(const Box& box, const BatchObjective& f, const GaConfig& cfg,
                                         const std::vector<Point>& initial = {});

// =============================================================================
// Modulation search
// =============================================================================

enum class Algorithm { PSO, GA };

[[nodiscard]] std::string_view to_string(Algorithm a);
/// Accepts "PSO" / "GA" (case-insensitive).
[[nodiscard]] Algorithm algorithm_from_string(std::string_view s);

struct OptimizerSettings {
    Algorithm algorithm = Algorithm::PSO;
    PsoConfig pso;
    GaConfig ga;

    [[nodiscard]] std::uint64_t seed() const { return algorithm == Algorithm::PSO ? pso.seed : ga.seed; }
};

struct IterationRecord {
    std::size_t iteration = 0;
    double best_fitness = 0.0;
};

struct LandscapeSample {
    ModulationParams mp;
    double fitness = 0.0;
    PerformanceMetrics metrics;
};

struct OptimizationResult {
    ModulationParams best;
    double best_fitness = 0.0;
    PerformanceMetrics metrics;
    bool feasible = false;  ///< achieved power within tolerance of the target
    std::vector<IterationRecord> history;
    std::vector<LandscapeSample> landscape;
    std::string evaluator;
    std::string algorithm;
    std::uint64_t seed = 0;
    std::size_t evaluations = 0;
};

[[nodiscard]] OptimizationResult pso_optimize(const ConverterParams& cp, const SearchSpace& space,
                                              const ObjectiveSpec& obj, const Evaluator& ev, const PsoConfig& cfg,
                                              const std::vector<ModulationParams>& initial = {});

[[nodiscard]] OptimizationResult ga_optimize(const ConverterParams& cp, const SearchSpace& space,
                                             const ObjectiveSpec& obj, const Evaluator& ev, const GaConfig& cfg,
                                             const std::vector<ModulationParams>& initial = {});

[[nodiscard]] OptimizationResult optimize(const ConverterParams& cp, const SearchSpace& space,
                                          const ObjectiveSpec& obj, const Evaluator& ev,
                                          const OptimizerSettings& settings,
                                          const std::vector<ModulationParams>& initial = {});

/// Exhaustive scan of `resolution` evenly spaced values per active dimension
/// (endpoints included). Ties go to the lexicographically smallest
/// (d0, d1, d2) lattice point.
[[nodiscard]] OptimizationResult grid_search(const ConverterParams& cp, const SearchSpace& space,
                                             const ObjectiveSpec& obj, const Evaluator& ev, std::size_t resolution);

struct Landscape {
    std::vector<LandscapeSample> samples;
    /// For three active dimensions: the (d1, d2) plane through the best sample.
    std::vector<LandscapeSample> slice;
    std::size_t best_index = 0;
    std::size_t resolution = 0;
    std::string evaluator;
};

inline constexpr std::size_t kMaxLandscapeResolution = 128;

[[nodiscard]] Landscape sample_landscape(const ConverterParams& cp, const SearchSpace& space,
                                         const ObjectiveSpec& obj, const Evaluator& ev, std::size_t resolution);

struct StrategyComparison {
    double target_power = 0.0;
    std::string evaluator;
    ModulationParams tps;
    ModulationParams sps;
    PerformanceMetrics tps_metrics;
    PerformanceMetrics sps_metrics;
    double tps_fitness = 0.0;
    double sps_fitness = 0.0;
    bool tps_feasible = false;
    bool sps_feasible = false;
    double i_pp_improvement = 0.0;   ///< (i_pp_SPS - i_pp_TPS) / i_pp_SPS
    double i_rms_improvement = 0.0;  ///< same for i_rms
};

/// The SPS point on the evaluator grid whose power is closest to the target
/// (ties go to the smaller d0). Throws ValidationError if the target exceeds
/// the largest SPS power.
[[nodiscard]] OptimizationResult sps_solution(const ConverterParams& cp, const ObjectiveSpec& obj,
                                              const Evaluator& ev);

/// Optimizes TPS (the swarm is seeded with the SPS solution, which TPS
/// contains) and compares it with SPS at the same target power.
[[nodiscard]] StrategyComparison compare_strategies(const ConverterParams& cp, const ObjectiveSpec& obj,
                                                    const Evaluator& ev, const OptimizerSettings& settings = {},
                                                    OptimizationResult* tps_result = nullptr);

/// Compares a given TPS candidate with the SPS solution.
[[nodiscard]] StrategyComparison compare_strategies(const ConverterParams& cp, const ObjectiveSpec& obj,
                                                    const Evaluator& ev, const ModulationParams& tps);

// =============================================================================
// Serialization
// =============================================================================

void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);
void to_json(nlohmann::json& j, const ObjectiveSpec& o);
void from_json(const nlohmann::json& j, ObjectiveSpec& o);
void to_json(nlohmann::json& j, const PsoConfig& c);
void from_json(const nlohmann::json& j, PsoConfig& c);
void to_json(nlohmann::json& j, const GaConfig& c);
void from_json(const nlohmann::json& j, GaConfig& c);
void to_json(nlohmann::json& j, const OptimizerSettings& s);
void from_json(const nlohmann::json& j, OptimizerSettings& s);
void to_json(nlohmann::json& j, const LandscapeSample& s);
void from_json(const nlohmann::json& j, LandscapeSample& s);
void to_json(nlohmann::json& j, const OptimizationResult& r);
void from_json(const nlohmann::json& j, OptimizationResult& r);
void to_json(nlohmann::json& j, const Landscape& l);
void from_json(const nlohmann::json& j, Landscape& l);
void to_json(nlohmann::json& j, const StrategyComparison& c);
void from_json(const nlohmann::json& j, StrategyComparison& c);

/// Header `d0,d1,d2,fitness,p_avg,i_pp,zvs_complete`, one row per sample.
void write_landscape_csv(std::ostream& os, const std::vector<LandscapeSample>& samples);
/// Reads the columns written above; other metrics stay default.
[[nodiscard]] std::vector<LandscapeSample> read_landscape_csv(std::istream& is);

}  // namespace dabmod::optimizer
