#pragma once

// =============================================================================
// Recurrent network machinery
// =============================================================================
// Stacked GRU layers with layer normalization on the three gate
// pre-activations, a dense output head, full-sequence backpropagation through
// time, Adam, and a central-difference gradient check.
//
// Gate equations (per layer, gate biases folded into the LN bias):
//   z  = sigmoid(LN_z(W_z x + U_z h))
//   r  = sigmoid(LN_r(W_r x + U_r h))
//   c  = tanh(LN_c(W_c x + U_c (r * h)))
//   h' = (1 - z) * c + z * h
// With layer_norm = false the LN blocks reduce to "+ bias" (plain GRU).
//
// Sequences are column-major: one column per time step.
// =============================================================================

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace dabmod::nn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kLayerNormEps = 1e-5;

enum Gate : std::size_t { kUpdate = 0, kReset = 1, kCandidate = 2 };

// =============================================================================
// Parameters
// =============================================================================

struct LnGruLayerParams {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    bool layer_norm = true;
    std::array<Matrix, 3> w;     ///< hidden x input, indexed by Gate
    std::array<Matrix, 3> u;     ///< hidden x hidden
    std::array<Vector, 3> gain;  ///< LN gain per gate block
    std::array<Vector, 3> bias;  ///< LN bias per gate block

    LnGruLayerParams() = default;
    /// Zero weights, LN gain 1, LN bias 0.
    LnGruLayerParams(std::size_t input, std::size_t hidden, bool use_layer_norm = true);

    [[nodiscard]] std::size_t param_count() const;
    void validate() const;
};

struct DenseLayerParams {
    Matrix w;  ///< output x hidden
    Vector b;
};

struct NetworkParams {
    std::vector<LnGruLayerParams> layers;
    DenseLayerParams head;

    [[nodiscard]] std::size_t input_dim() const;
    [[nodiscard]] std::size_t output_dim() const;
    [[nodiscard]] std::size_t param_count() const;

    /// Fixed order: per layer w[z,r,c], u[z,r,c], gain[z,r,c], bias[z,r,c];
    /// then head w, head b. Matrices column-major.
    [[nodiscard]] Vector flatten() const;
    void unflatten(const Vector& flat);

    /// Same shapes, all entries zero (gains included).
    [[nodiscard]] NetworkParams zeros_like() const;

    void validate() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from a seeded generator;
/// LN gain 1, LN bias 0, head bias 0.
[[nodiscard]] NetworkParams init_network(std::size_t input_dim,
                                         const std::vector<std::size_t>& hidden_dims,
                                         std::size_t output_dim,
                                         std::uint64_t seed,
                                         bool layer_norm = true);

// =============================================================================
// Forward / backward
// =============================================================================

/// (x - mean) / sqrt(var + eps) * gain + bias with population variance.
[[nodiscard]] Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias,
                                double eps = kLayerNormEps);

[[nodiscard]] Vector ln_gru_cell_forward(const LnGruLayerParams& p, const Vector& x, const Vector& h);

/// Intermediates of one layer over a sequence, one column per step.
struct LayerCache {
    Matrix x;
    Matrix h_prev;
    Matrix h;
    std::array<Matrix, 3> act;       ///< z, r, c
    std::array<Matrix, 3> xhat;      ///< normalized pre-activations (raw sums without LN)
    std::array<Eigen::RowVectorXd, 3> inv_sigma;
    Matrix rh;                       ///< r * h_prev
};

struct SequenceCache {
    std::vector<LayerCache> layers;
};

struct ForwardResult {
    Matrix outputs;  ///< output_dim x T
    SequenceCache cache;
};

/// h0 may be empty (zeros) or hold one vector per layer.
[[nodiscard]] ForwardResult sequence_forward(const NetworkParams& net,
                                             const Matrix& inputs,
                                             const std::vector<Vector>& h0 = {});

/// Parameter gradients of a scalar loss whose per-step output gradients are
/// `output_grads` (output_dim x T).
[[nodiscard]] NetworkParams sequence_backward(const NetworkParams& net,
                                              const SequenceCache& cache,
                                              const Matrix& output_grads);

/// Step-by-step inference with preallocated buffers, for closed-loop use.
/// Holds a repacked copy of the parameters (gate matrices stacked).
class Stepper {
public:
    explicit Stepper(const NetworkParams& net);

    void reset();
    /// Advances every layer by one step and returns the head output.
    const Vector& step(const Vector& x);

    [[nodiscard]] const std::vector<Vector>& hidden() const { return h_; }

private:
    struct Layer {
        Eigen::Index hidden = 0;
        bool layer_norm = true;
        Matrix w;     ///< [W_z; W_r; W_c]
        Matrix u_zr;  ///< [U_z; U_r]
        Matrix u_c;
        Vector gain;  ///< stacked z, r, c
        Vector bias;
        Vector pre;   ///< stacked pre-activations
        Vector rh;
    };

    std::vector<Layer> layers_;
    std::vector<Vector> h_;
    Matrix head_w_;
    Vector head_b_;
    Eigen::Index input_dim_ = 0;
    Vector out_;
};

/// Stepper over a batch of independent sequences, one column each.
class BatchStepper {
public:
    BatchStepper(const NetworkParams& net, Eigen::Index batch);

    void reset();
    /// `x` is input_dim x batch; returns output_dim x batch.
    const Matrix& step(const Matrix& x);

    [[nodiscard]] Eigen::Index batch() const { return batch_; }

private:
    struct Layer {
        Eigen::Index hidden = 0;
        bool layer_norm = true;
        Matrix w;
        Matrix u_zr;
        Matrix u_c;
        Vector gain;
        Vector bias;
        Matrix pre;
        Matrix rh;
    };

    std::vector<Layer> layers_;
    std::vector<Matrix> h_;
    Matrix head_w_;
    Vector head_b_;
    Eigen::Index input_dim_ = 0;
    Eigen::Index batch_ = 0;
    Matrix out_;
};

// =============================================================================
// Optimization and verification
// =============================================================================

struct AdamState {
    Vector m;
    Vector v;
    std::size_t step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t param_count, double lr = 1e-3);
};

/// Bias-corrected Adam update of `params` in place.
void adam_step(NetworkParams& params, const NetworkParams& grads, AdamState& state);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t probes = 0;
    double threshold = 1e-4;
    bool passed = true;
};

struct LossAndGrad {
    double loss = 0.0;
    NetworkParams grad;
};

using LossFunction = std::function<LossAndGrad(const NetworkParams&)>;

/// Central differences on `probe_count` randomly chosen parameters; relative
/// error |a - n| / max(|a|, |n|, 1e-8).
[[nodiscard]] GradCheckReport finite_difference_check(const NetworkParams& net,
                                                      const LossFunction& loss,
                                                      std::size_t probe_count,
                                                      double eps = 1e-5,
                                                      double threshold = 1e-4,
                                                      std::uint64_t seed = 0);

// =============================================================================
// Checkpoints
// =============================================================================

struct Checkpoint {
    NetworkParams net;
    std::uint64_t seed = 0;
    nlohmann::json metadata = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const NetworkParams& net);
void from_json(const nlohmann::json& j, NetworkParams& net);
void to_json(nlohmann::json& j, const Checkpoint& c);
void from_json(const nlohmann::json& j, Checkpoint& c);

}  // namespace dabmod::nn
