#pragma once

// =============================================================================
// Physics-informed recurrent surrogate
// =============================================================================
// Two recurrent networks predict one switching period step by step:
//
//   ModNet: [v_p(t_{k-1}), v_s(t_{k-1}), c_p(t_k), c_s(t_k), d0, d1, d2,
//            v_in, v_out]                   -> [v_p(t_k) - c_p(t_k), v_s(t_k) - c_s(t_k)]
//   CirNet: [i_L(t_k), v_p(t_k), v_s(t_k)]             -> y_k
//           i_L(t_{k+1}) = i_L(t_k) + kappa * y_k
//
// c_p, c_s are the commanded (ideal) bridge voltages; ModNet predicts the
// deviation from them (ringing, overshoot). All voltages are
// divided by the voltage scale V_s, currents by I_s = V_s / (8 f_s L), and
// kappa = V_s dt / (L I_s), so y_k is the inductor voltage in units of V_s.
// CirNet is trained on a one-step data loss plus the squared residual of
// L di/dt = -R i + v_p - n v_s, normalized by V_s.
// =============================================================================

#include "dabmod/dab_physics.hpp"
#include "dabmod/neural_core.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dabmod::surrogate {

using physics::ConverterParams;
using physics::ModulationParams;
using physics::SamplingGrid;
using physics::Waveform;

// =============================================================================
// Domain types
// =============================================================================

/// Allowed dc-link voltages around a converter's nominal point.
struct OperatingEnvelope {
    double v_in_min = 180.0;
    double v_in_max = 220.0;
    double v_out_min = 144.0;
    double v_out_max = 176.0;

    /// Nominal +/- 10 % on both links.
    [[nodiscard]] static OperatingEnvelope around(const ConverterParams& cp);
    void validate() const;
    bool operator==(const OperatingEnvelope&) const = default;
};

struct OperatingPoint {
    ModulationParams mp;
    double v_in = 200.0;
    double v_out = 160.0;

    /// Modulation invariants plus the envelope; messages name the violated bound.
    void validate(const OperatingEnvelope& env) const;
    bool operator==(const OperatingPoint&) const = default;
};

enum class Provenance { Ideal, Ringing, External };

[[nodiscard]] std::string_view to_string(Provenance p);
[[nodiscard]] Provenance provenance_from_string(std::string_view s);

struct TrainingSample {
    OperatingPoint op;
    Waveform waveform;
};

struct TrainingSet {
    std::vector<TrainingSample> samples;
    SamplingGrid grid;
    Provenance provenance = Provenance::Ideal;

    void validate() const;
};

struct TrainingConfig {
    std::size_t epochs = 300;
    double learning_rate = 3e-3;
    /// Cosine decay from learning_rate to learning_rate * final_lr_fraction
    /// over the epoch budget; 1 keeps the rate constant.
    double final_lr_fraction = 1.0;
    double lambda_phys = 1.0;
    std::uint64_t seed = 0;
    std::size_t patience = 0;  ///< epochs without improvement before stopping; 0 disables
    std::vector<std::size_t> hidden{32, 32};
    bool layer_norm = true;
    std::size_t collocation_points = 20;  ///< unlabeled operating points for the physics loss
    std::size_t collocation_refresh = 10;  ///< epochs between collocation rollouts
    /// Training sequences repeat each waveform this many times so the
    /// networks learn to carry state across period boundaries.
    std::size_t sequence_periods = 2;

    void validate() const;
};

struct Normalization {
    double v_scale = 1.0;  ///< V_s [V]
    double i_scale = 1.0;  ///< I_s [A]
    double kappa = 1.0;    ///< current increment per unit CirNet output

    [[nodiscard]] static Normalization for_converter(const ConverterParams& cp, const SamplingGrid& grid);
    void validate() const;

    [[nodiscard]] double normalize_voltage(double v) const { return v / v_scale; }
    [[nodiscard]] double denormalize_voltage(double v) const { return v * v_scale; }
    [[nodiscard]] double normalize_current(double i) const { return i / i_scale; }
    [[nodiscard]] double denormalize_current(double i) const { return i * i_scale; }
};

struct SurrogatePair {
    nn::NetworkParams modnet;
    nn::NetworkParams cirnet;
    Normalization norm;
    SamplingGrid grid;
    nlohmann::json metadata = nlohmann::json::object();

    void validate() const;
};

inline constexpr std::size_t kModNetInputs = 9;
inline constexpr std::size_t kModNetOutputs = 2;
/// Row of the commanded primary voltage in the ModNet input (secondary follows).
inline constexpr Eigen::Index kCommandedRow = 2;
inline constexpr std::size_t kCirNetInputs = 3;
inline constexpr std::size_t kCirNetOutputs = 1;

struct PointReport {
    OperatingPoint op;
    double mae_i_l = 0.0;
    double mae_v = 0.0;
    double residual_rms = 0.0;
    double i_pp_predicted = 0.0;
    double i_pp_reference = 0.0;
};

struct EvalReport {
    double mae_i_l = 0.0;       ///< [A], mean over points
    double mae_v = 0.0;         ///< [V], mean over points and both bridges
    double residual_rms = 0.0;  ///< [V], RMS over all points and samples
    std::vector<PointReport> points;
};

struct TrainResult {
    nn::NetworkParams net;
    std::vector<double> history;  ///< total loss per completed epoch
    nlohmann::json metadata = nlohmann::json::object();
};

// =============================================================================
// Data
// =============================================================================

/// Ranges the sampler draws modulation ratios from.
struct ModulationRanges {
    double d0_min = 0.05;
    double d0_max = 0.45;
    double d_min = 0.4;  ///< inner ratios d1, d2
    double d_max = 1.0;

    void validate() const;
};

/// Uniformly sampled points inside the envelope and ranges, snapped to the
/// grid. SPS fixes d1 = d2 = 1; EPS keeps d2 = 1; DPS draws one inner ratio.
[[nodiscard]] std::vector<OperatingPoint> sample_operating_points(const ConverterParams& cp,
                                                                  const OperatingEnvelope& env,
                                                                  const SamplingGrid& grid,
                                                                  std::size_t count,
                                                                  std::uint64_t seed,
                                                                  physics::Strategy strategy =
                                                                      physics::Strategy::TPS,
                                                                  const ModulationRanges& ranges = {});

/// Oracle waveforms for each point. With ringing enabled the perturbation is
/// re-centred to zero mean per bridge and the current re-solved for the
/// perturbed drive, so every sample still satisfies the circuit equation.
[[nodiscard]] TrainingSet generate_dataset(const ConverterParams& cp,
                                           const std::vector<OperatingPoint>& points,
                                           const SamplingGrid& grid,
                                           const physics::RingingParams& rp,
                                           std::uint64_t seed,
                                           const OperatingEnvelope& env);
[[nodiscard]] TrainingSet generate_dataset(const ConverterParams& cp,
                                           const std::vector<OperatingPoint>& points,
                                           const SamplingGrid& grid,
                                           const physics::RingingParams& rp = {},
                                           std::uint64_t seed = 0);

/// Directory of `point_NNN.csv` waveforms plus `manifest.json`.
void save_training_set(const std::filesystem::path& dir, const TrainingSet& set);
[[nodiscard]] TrainingSet load_training_set(const std::filesystem::path& dir);

// =============================================================================
// Physics and features
// =============================================================================

/// r_k = L (i_{k+1} - i_k)/dt + R i_k - v_p[k] + n v_s[k], k = 0..N-2 [V].
[[nodiscard]] std::vector<double> physics_residual(const ConverterParams& cp,
                                                   const std::vector<double>& i_seq,
                                                   const std::vector<double>& v_p_seq,
                                                   const std::vector<double>& v_s_seq,
                                                   double dt);

/// Normalized ModNet input column for step k.
void modnet_features(const Normalization& norm, const OperatingPoint& op, double prev_v_p, double prev_v_s,
                     double cmd_v_p, double cmd_v_s, Eigen::Ref<nn::Vector> out);

// =============================================================================
// Training
// =============================================================================

/// Teacher-forced one-step MSE on normalized (v_p, v_s).
[[nodiscard]] TrainResult train_modnet(const TrainingSet& set,
                                       const ConverterParams& cp,
                                       const TrainingConfig& cfg);

/// Data loss plus lambda_phys times the physics loss. The physics loss covers
/// the training sequences and `collocation` points, whose current inputs come
/// from periodic closed-loop rollouts of the network being trained.
[[nodiscard]] TrainResult train_cirnet(const TrainingSet& set,
                                       const nn::NetworkParams& modnet,
                                       const ConverterParams& cp,
                                       const TrainingConfig& cfg,
                                       const std::vector<OperatingPoint>& collocation = {});

/// ModNet then CirNet; collocation points are sampled from the envelope and
/// ranges with a seed derived from cfg.seed.
[[nodiscard]] SurrogatePair train_pair(const TrainingSet& set,
                                       const ConverterParams& cp,
                                       const TrainingConfig& cfg,
                                       const OperatingEnvelope& env,
                                       const ModulationRanges& ranges = {});

/// Trains CirNet for each candidate lambda on all but the last
/// `validation_count` samples and keeps the one with the lowest rollout MAE on
/// the rest. The scores are recorded in the returned metadata.
[[nodiscard]] double select_lambda(const TrainingSet& set,
                                   const nn::NetworkParams& modnet,
                                   const ConverterParams& cp,
                                   const TrainingConfig& cfg,
                                   const std::vector<double>& candidates,
                                   std::size_t validation_count,
                                   const std::vector<OperatingPoint>& collocation,
                                   nlohmann::json* log = nullptr);

// =============================================================================
// Inference
// =============================================================================

struct RolloutInit {
    double v_p = 0.0;  ///< voltage fed to the first ModNet step [V]
    double v_s = 0.0;
    double i_l = 0.0;  ///< current at the first recorded step [A]
};

struct RolloutOptions {
    /// Defaults to the commanded voltages at t_0 and zero current.
    std::optional<RolloutInit> init;
    std::size_t warmup_periods = 1;
    /// Subtracts the mean current of the last warm-up period before recording.
    bool dc_restore = true;
};

struct RolloutResult {
    Waveform waveform;  ///< `steps` samples on the pair's grid
    std::size_t modnet_evals = 0;
    std::size_t cirnet_evals = 0;
};

/// Closed-loop generation. Throws RolloutDivergedError on a non-finite state.
[[nodiscard]] RolloutResult rollout(const SurrogatePair& pair,
                                    const OperatingPoint& op,
                                    const ConverterParams& cp,
                                    std::size_t steps,
                                    const RolloutOptions& opts = {});

/// Lock-step rollouts of several operating points; equivalent to calling
/// rollout() on each.
[[nodiscard]] std::vector<RolloutResult> rollout_batch(const SurrogatePair& pair,
                                                       const std::vector<OperatingPoint>& ops,
                                                       const ConverterParams& cp,
                                                       std::size_t steps,
                                                       const RolloutOptions& opts = {});

/// Anything that maps an operating point to one predicted period.
using Predictor = std::function<Waveform(const OperatingPoint&)>;

[[nodiscard]] Predictor pair_predictor(const SurrogatePair& pair, const ConverterParams& cp);

/// Compares predictions against the holdout waveforms.
[[nodiscard]] EvalReport evaluate(const Predictor& predict, const ConverterParams& cp, const TrainingSet& holdout);
[[nodiscard]] EvalReport evaluate(const SurrogatePair& pair, const ConverterParams& cp, const TrainingSet& holdout);

// =============================================================================
// Serialization
// =============================================================================

void to_json(nlohmann::json& j, const OperatingEnvelope& e);
void from_json(const nlohmann::json& j, OperatingEnvelope& e);
void to_json(nlohmann::json& j, const OperatingPoint& op);
void from_json(const nlohmann::json& j, OperatingPoint& op);
void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);
void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);
void to_json(nlohmann::json& j, const SurrogatePair& p);
void from_json(const nlohmann::json& j, SurrogatePair& p);
void to_json(nlohmann::json& j, const PointReport& r);
void to_json(nlohmann::json& j, const EvalReport& r);

void save_pair(const std::filesystem::path& path, const SurrogatePair& pair);
[[nodiscard]] SurrogatePair load_pair(const std::filesystem::path& path);

}  // namespace dabmod::surrogate
