#include "dabmod/surrogate.hpp"

#include "dabmod/errors.hpp"
#include "dabmod/physics_io.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

namespace dabmod::surrogate {

using nn::Matrix;
using nn::NetworkParams;
using nn::Vector;
using physics::Strategy;
using RowVector = Eigen::RowVectorXd;

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw ValidationError(message);
}

/// Commanded bridge voltages for an operating point, in volts.
Waveform commanded(const ConverterParams& cp, const OperatingPoint& op, const SamplingGrid& grid) {
    return physics::synthesize_bridge_voltages(cp.at_voltages(op.v_in, op.v_out), op.mp, grid);
}

/// Teacher-forced ModNet inputs (previous true voltages) and targets
/// (deviation of the true voltages from the commanded ones).
struct ModSequence {
    Matrix inputs;
    Matrix targets;
};

ModSequence modnet_sequence(const Normalization& norm, const ConverterParams& cp, const TrainingSample& s,
                            const SamplingGrid& grid, std::size_t periods) {
    const Waveform cmd = commanded(cp, s.op, grid);
    const auto n = static_cast<Eigen::Index>(grid.samples_per_period());
    const auto len = n * static_cast<Eigen::Index>(periods);
    ModSequence seq{Matrix(kModNetInputs, len), Matrix(kModNetOutputs, len)};
    for (Eigen::Index k = 0; k < len; ++k) {
        const auto km1 = static_cast<std::size_t>((k + n - 1) % n);
        const auto ku = static_cast<std::size_t>(k % n);
        modnet_features(norm, s.op, s.waveform.v_p[km1], s.waveform.v_s[km1], cmd.v_p[ku], cmd.v_s[ku],
                        seq.inputs.col(k));
        seq.targets(0, k) = norm.normalize_voltage(s.waveform.v_p[ku] - cmd.v_p[ku]);
        seq.targets(1, k) = norm.normalize_voltage(s.waveform.v_s[ku] - cmd.v_s[ku]);
    }
    return seq;
}

/// CirNet inputs plus what the two losses need, all normalized.
struct CirSequence {
    Matrix inputs;          ///< [i_k, v_p_k, v_s_k]
    RowVector drive;        ///< v_p_k - n v_s_k
    RowVector next;         ///< labeled i_{k+1}; empty for collocation sequences
};

CirSequence cir_sequence(const ConverterParams& cp, const RowVector& i, const RowVector& v_p, const RowVector& v_s) {
    CirSequence seq;
    seq.inputs.resize(kCirNetInputs, i.size());
    seq.inputs.row(0) = i;
    seq.inputs.row(1) = v_p;
    seq.inputs.row(2) = v_s;
    seq.drive = v_p - cp.n * v_s;
    return seq;
}

/// `v / scale` repeated `periods` times.
RowVector normalized_row(const std::vector<double>& v, double scale, std::size_t periods = 1) {
    const std::size_t n = v.size();
    RowVector r(static_cast<Eigen::Index>(n * periods));
    for (std::size_t k = 0; k < n * periods; ++k) r(static_cast<Eigen::Index>(k)) = v[k % n] / scale;
    return r;
}

void check_grid(const SamplingGrid& a, const SamplingGrid& b) {
    if (a.samples_per_period() != b.samples_per_period() || std::abs(a.dt() - b.dt()) > 1e-12 * a.dt()) {
        throw DimensionError("training set grid does not match the surrogate grid");
    }
}

void accumulate(Vector& sum, const NetworkParams& grads) {
    sum += grads.flatten();
}

}  // namespace

// =============================================================================
// Domain types
// =============================================================================

OperatingEnvelope OperatingEnvelope::around(const ConverterParams& cp) {
    return {0.9 * cp.v_in, 1.1 * cp.v_in, 0.9 * cp.v_out, 1.1 * cp.v_out};
}

void OperatingEnvelope::validate() const {
    require(std::isfinite(v_in_min) && v_in_min > 0.0 && v_in_min <= v_in_max,
            fmt::format("v_in range [{}, {}] is empty or nonpositive", v_in_min, v_in_max));
    require(std::isfinite(v_out_min) && v_out_min > 0.0 && v_out_min <= v_out_max,
            fmt::format("v_out range [{}, {}] is empty or nonpositive", v_out_min, v_out_max));
}

void OperatingPoint::validate(const OperatingEnvelope& env) const {
    mp.validate();
    require(v_in >= env.v_in_min && v_in <= env.v_in_max,
            fmt::format("v_in = {} outside [{}, {}]", v_in, env.v_in_min, env.v_in_max));
    require(v_out >= env.v_out_min && v_out <= env.v_out_max,
            fmt::format("v_out = {} outside [{}, {}]", v_out, env.v_out_min, env.v_out_max));
}

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::Ideal: return "ideal";
        case Provenance::Ringing: return "ringing";
        case Provenance::External: return "external";
    }
    return "ideal";
}

Provenance provenance_from_string(std::string_view s) {
    if (s == "ideal") return Provenance::Ideal;
    if (s == "ringing") return Provenance::Ringing;
    if (s == "external") return Provenance::External;
    throw ValidationError(fmt::format("unknown provenance '{}'", s));
}

void ModulationRanges::validate() const {
    require(d0_min >= -1.0 && d0_min <= d0_max && d0_max <= 1.0,
            fmt::format("d0 range [{}, {}] must be ordered inside [-1, 1]", d0_min, d0_max));
    require(d_min >= 0.0 && d_min <= d_max && d_max <= 1.0,
            fmt::format("inner ratio range [{}, {}] must be ordered inside [0, 1]", d_min, d_max));
}

void TrainingSet::validate() const {
    require(!samples.empty(), "training set is empty");
    for (const auto& s : samples) {
        const std::size_t n = grid.samples_per_period();
        if (s.waveform.v_p.size() != n || s.waveform.v_s.size() != n || s.waveform.i_l.size() != n) {
            throw DimensionError("training waveform does not cover one grid period");
        }
        check_grid(s.waveform.grid, grid);
    }
}

void TrainingConfig::validate() const {
    require(epochs > 0, "epochs must be > 0");
    require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning rate must be > 0");
    require(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0, "final_lr_fraction must be in (0, 1]");
    require(std::isfinite(lambda_phys) && lambda_phys >= 0.0, "lambda_phys must be >= 0");
    require(!hidden.empty(), "at least one hidden layer is required");
    require(collocation_refresh > 0, "collocation_refresh must be > 0");
    require(sequence_periods > 0, "sequence_periods must be > 0");
}

Normalization Normalization::for_converter(const ConverterParams& cp, const SamplingGrid& grid) {
    cp.validate();
    Normalization n;
    n.v_scale = cp.v_in;
    n.i_scale = cp.v_in / (8.0 * cp.f_s * cp.l_lk);
    n.kappa = n.v_scale * grid.dt() / (cp.l_lk * n.i_scale);
    return n;
}

void Normalization::validate() const {
    require(std::isfinite(v_scale) && v_scale > 0.0, "voltage scale must be > 0");
    require(std::isfinite(i_scale) && i_scale > 0.0, "current scale must be > 0");
    require(std::isfinite(kappa) && kappa > 0.0, "current step gain must be > 0");
}

void SurrogatePair::validate() const {
    norm.validate();
    modnet.validate();
    cirnet.validate();
    if (modnet.input_dim() != kModNetInputs || modnet.output_dim() != kModNetOutputs) {
        throw DimensionError(fmt::format("ModNet must map {} inputs to {} outputs", kModNetInputs, kModNetOutputs));
    }
    if (cirnet.input_dim() != kCirNetInputs || cirnet.output_dim() != kCirNetOutputs) {
        throw DimensionError(fmt::format("CirNet must map {} inputs to {} output", kCirNetInputs, kCirNetOutputs));
    }
}

// =============================================================================
// Data
// =============================================================================

std::vector<OperatingPoint> sample_operating_points(const ConverterParams& cp, const OperatingEnvelope& env,
                                                    const SamplingGrid& grid, std::size_t count,
                                                    std::uint64_t seed, Strategy strategy,
                                                    const ModulationRanges& ranges) {
    cp.validate();
    env.validate();
    ranges.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double top = 1.0 - 2.0 / static_cast<double>(grid.samples_per_period());
    std::vector<OperatingPoint> points;
    points.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        OperatingPoint op;
        op.v_in = env.v_in_min + (env.v_in_max - env.v_in_min) * u(rng);
        op.v_out = env.v_out_min + (env.v_out_max - env.v_out_min) * u(rng);
        const double d0 = ranges.d0_min + (ranges.d0_max - ranges.d0_min) * u(rng);
        const double a = ranges.d_min + (ranges.d_max - ranges.d_min) * u(rng);
        const double b = ranges.d_min + (ranges.d_max - ranges.d_min) * u(rng);
        switch (strategy) {
            case Strategy::SPS: op.mp = ModulationParams::sps(d0); break;
            case Strategy::EPS: op.mp = {Strategy::EPS, d0, std::min(a, top), 1.0}; break;
            case Strategy::DPS: op.mp = {Strategy::DPS, d0, a, a}; break;
            case Strategy::TPS: op.mp = ModulationParams::tps(d0, a, b); break;
        }
        op.mp = physics::snap_to_grid(op.mp, grid);
        if (strategy == Strategy::EPS) op.mp.d1 = std::min(op.mp.d1, top);
        op.validate(env);
        points.push_back(op);
    }
    return points;
}

TrainingSet generate_dataset(const ConverterParams& cp, const std::vector<OperatingPoint>& points,
                             const SamplingGrid& grid, const physics::RingingParams& rp, std::uint64_t seed,
                             const OperatingEnvelope& env) {
    cp.validate();
    env.validate();
    require(!points.empty(), "generate_dataset needs at least one operating point");
    TrainingSet set;
    set.grid = grid;
    set.provenance = rp.enabled ? Provenance::Ringing : Provenance::Ideal;
    for (std::size_t idx = 0; idx < points.size(); ++idx) {
        const OperatingPoint& op = points[idx];
        op.validate(env);
        const ConverterParams cpo = cp.at_voltages(op.v_in, op.v_out);
        Waveform w = physics::solve_steady_state(cpo, op.mp, grid);
        if (rp.enabled) {
            Waveform rung = physics::apply_ringing(w, rp, seed + idx);
            auto recentre = [](std::vector<double>& out, const std::vector<double>& ideal) {
                double mean = 0.0;
                for (std::size_t k = 0; k < out.size(); ++k) mean += out[k] - ideal[k];
                mean /= static_cast<double>(out.size());
                for (double& v : out) v -= mean;
            };
            recentre(rung.v_p, w.v_p);
            recentre(rung.v_s, w.v_s);
            w = physics::solve_steady_state(cpo, rung);
        }
        set.samples.push_back({op, std::move(w)});
    }
    return set;
}

TrainingSet generate_dataset(const ConverterParams& cp, const std::vector<OperatingPoint>& points,
                             const SamplingGrid& grid, const physics::RingingParams& rp, std::uint64_t seed) {
    return generate_dataset(cp, points, grid, rp, seed, OperatingEnvelope::around(cp));
}

void save_training_set(const std::filesystem::path& dir, const TrainingSet& set) {
    set.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {{"grid", set.grid},
                               {"provenance", std::string(to_string(set.provenance))},
                               {"samples", nlohmann::json::array()}};
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
        const std::string file = fmt::format("point_{:03d}.csv", i);
        physics::write_waveform_csv(dir / file, set.samples[i].waveform);
        manifest["samples"].push_back({{"op", set.samples[i].op}, {"file", file}});
    }
    std::ofstream os(dir / "manifest.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    os << manifest.dump(2) << '\n';
}

TrainingSet load_training_set(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
    const nlohmann::json manifest = nlohmann::json::parse(is);
    TrainingSet set;
    manifest.at("grid").get_to(set.grid);
    set.provenance = provenance_from_string(manifest.at("provenance").get<std::string>());
    for (const auto& entry : manifest.at("samples")) {
        TrainingSample s;
        entry.at("op").get_to(s.op);
        s.waveform = physics::read_waveform_csv(dir / entry.at("file").get<std::string>());
        set.samples.push_back(std::move(s));
    }
    set.validate();
    return set;
}

// =============================================================================
// Physics and features
// =============================================================================

std::vector<double> physics_residual(const ConverterParams& cp, const std::vector<double>& i_seq,
                                     const std::vector<double>& v_p_seq, const std::vector<double>& v_s_seq,
                                     double dt) {
    if (i_seq.size() != v_p_seq.size() || i_seq.size() != v_s_seq.size()) {
        throw DimensionError("residual sequences must have equal lengths");
    }
    if (i_seq.size() < 2) throw DimensionError("residual needs at least two samples");
    require(std::isfinite(dt) && dt > 0.0, "residual time step must be > 0");
    std::vector<double> r(i_seq.size() - 1);
    for (std::size_t k = 0; k + 1 < i_seq.size(); ++k) {
        r[k] = cp.l_lk * (i_seq[k + 1] - i_seq[k]) / dt + cp.r_l * i_seq[k] - v_p_seq[k] + cp.n * v_s_seq[k];
    }
    return r;
}

void modnet_features(const Normalization& norm, const OperatingPoint& op, double prev_v_p, double prev_v_s,
                     double cmd_v_p, double cmd_v_s, Eigen::Ref<Vector> out) {
    if (out.size() != static_cast<Eigen::Index>(kModNetInputs)) throw DimensionError("ModNet feature size");
    out(0) = norm.normalize_voltage(prev_v_p);
    out(1) = norm.normalize_voltage(prev_v_s);
    out(2) = norm.normalize_voltage(cmd_v_p);
    out(3) = norm.normalize_voltage(cmd_v_s);
    out(4) = op.mp.d0;
    out(5) = op.mp.d1;
    out(6) = op.mp.d2;
    out(7) = norm.normalize_voltage(op.v_in);
    out(8) = norm.normalize_voltage(op.v_out);
}

// =============================================================================
// Training
// =============================================================================

namespace {

/// Adam loop shared by both networks. `epoch_loss` fills the gradient sum and
/// returns the loss for the current parameters.
template <typename EpochFn>
TrainResult fit(NetworkParams net, const TrainingConfig& cfg, EpochFn&& epoch_loss) {
    TrainResult result;
    nn::AdamState state(net.param_count(), cfg.learning_rate);
    NetworkParams grads = net.zeros_like();
    Vector gsum(static_cast<Eigen::Index>(net.param_count()));
    double best = std::numeric_limits<double>::infinity();
    NetworkParams best_net = net;
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        gsum.setZero();
        const double loss = epoch_loss(net, epoch, gsum);
        if (!std::isfinite(loss) || !gsum.allFinite()) {
            throw TrainingDivergedError(fmt::format("training diverged at epoch {}", epoch), epoch);
        }
        result.history.push_back(loss);
        if (loss < best) {
            best = loss;
            best_net = net;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
        const double progress = cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1) : 0.0;
        const double floor = cfg.final_lr_fraction;
        state.learning_rate = cfg.learning_rate * (floor + 0.5 * (1.0 - floor) * (1.0 + std::cos(std::numbers::pi * progress)));
        grads.unflatten(gsum);
        nn::adam_step(net, grads, state);
    }
    result.net = std::move(best_net);
    result.metadata["epochs_run"] = result.history.size();
    result.metadata["best_loss"] = best;
    return result;
}

/// Teacher-forced ModNet voltage predictions for one training sample.
std::pair<RowVector, RowVector> modnet_predictions(const NetworkParams& modnet, const Normalization& norm,
                                                   const ConverterParams& cp, const TrainingSample& s,
                                                   const SamplingGrid& grid, std::size_t periods) {
    const ModSequence seq = modnet_sequence(norm, cp, s, grid, periods);
    const Matrix v = nn::sequence_forward(modnet, seq.inputs).outputs + seq.inputs.middleRows(kCommandedRow, 2);
    return {v.row(0), v.row(1)};
}

}  // namespace

TrainResult train_modnet(const TrainingSet& set, const ConverterParams& cp, const TrainingConfig& cfg) {
    set.validate();
    cfg.validate();
    const Normalization norm = Normalization::for_converter(cp, set.grid);
    std::vector<ModSequence> seqs;
    for (const auto& s : set.samples) seqs.push_back(modnet_sequence(norm, cp, s, set.grid, cfg.sequence_periods));
    const double count = static_cast<double>(seqs.size() * set.grid.samples_per_period() * cfg.sequence_periods *
                                             kModNetOutputs);

    NetworkParams net = nn::init_network(kModNetInputs, cfg.hidden, kModNetOutputs, cfg.seed, cfg.layer_norm);
    TrainResult r = fit(std::move(net), cfg, [&](const NetworkParams& p, std::size_t, Vector& gsum) {
        double loss = 0.0;
        for (const auto& seq : seqs) {
            auto fwd = nn::sequence_forward(p, seq.inputs);
            const Matrix diff = fwd.outputs - seq.targets;
            loss += diff.squaredNorm() / count;
            accumulate(gsum, nn::sequence_backward(p, fwd.cache, (2.0 / count) * diff));
        }
        return loss;
    });
    r.metadata["network"] = "modnet";
    return r;
}

TrainResult train_cirnet(const TrainingSet& set, const NetworkParams& modnet, const ConverterParams& cp,
                         const TrainingConfig& cfg, const std::vector<OperatingPoint>& collocation) {
    set.validate();
    cfg.validate();
    if (modnet.input_dim() != kModNetInputs || modnet.output_dim() != kModNetOutputs) {
        throw DimensionError("ModNet has the wrong shape for CirNet training");
    }
    const Normalization norm = Normalization::for_converter(cp, set.grid);
    const double loss_r = cp.r_l * norm.i_scale / norm.v_scale;

    std::vector<CirSequence> labeled;
    for (const auto& s : set.samples) {
        const auto [vp, vs] = modnet_predictions(modnet, norm, cp, s, set.grid, cfg.sequence_periods);
        const RowVector i = normalized_row(s.waveform.i_l, norm.i_scale, cfg.sequence_periods);
        CirSequence seq = cir_sequence(cp, i, vp, vs);
        seq.next.resize(i.size());
        for (Eigen::Index k = 0; k < i.size(); ++k) seq.next(k) = i((k + 1) % i.size());
        labeled.push_back(std::move(seq));
    }
    const bool physics = cfg.lambda_phys > 0.0;
    std::vector<CirSequence> unlabeled;
    const std::size_t n = set.grid.samples_per_period() * cfg.sequence_periods;
    const double data_count = static_cast<double>(labeled.size() * n);

    NetworkParams net = nn::init_network(kCirNetInputs, cfg.hidden, kCirNetOutputs, cfg.seed + 1, cfg.layer_norm);
    double last_data = 0.0;
    double last_phys = 0.0;
    TrainResult r = fit(std::move(net), cfg, [&](const NetworkParams& p, std::size_t epoch, Vector& gsum) {
        if (physics && !collocation.empty() && epoch % cfg.collocation_refresh == 0) {
            unlabeled.clear();
            SurrogatePair pair{modnet, p, norm, set.grid, {}};
            for (const auto& op : collocation) {
                const Waveform w = rollout(pair, op, cp, n).waveform;
                unlabeled.push_back(cir_sequence(cp, normalized_row(w.i_l, norm.i_scale),
                                                 normalized_row(w.v_p, norm.v_scale),
                                                 normalized_row(w.v_s, norm.v_scale)));
            }
        }
        const double phys_count = static_cast<double>((labeled.size() + unlabeled.size()) * n);
        double data_loss = 0.0;
        double phys_loss = 0.0;
        auto step = [&](const CirSequence& seq) {
            auto fwd = nn::sequence_forward(p, seq.inputs);
            const RowVector y = fwd.outputs.row(0);
            RowVector dy = RowVector::Zero(y.size());
            if (seq.next.size() > 0) {
                const RowVector e = seq.inputs.row(0) + norm.kappa * y - seq.next;
                data_loss += e.squaredNorm() / data_count;
                dy += (2.0 * norm.kappa / data_count) * e;
            }
            if (physics) {
                const RowVector rho = y + loss_r * seq.inputs.row(0) - seq.drive;
                phys_loss += rho.squaredNorm() / phys_count;
                dy += (2.0 * cfg.lambda_phys / phys_count) * rho;
            }
            accumulate(gsum, nn::sequence_backward(p, fwd.cache, dy));
        };
        for (const auto& seq : labeled) step(seq);
        for (const auto& seq : unlabeled) step(seq);
        last_data = data_loss;
        last_phys = phys_loss;
        return data_loss + cfg.lambda_phys * phys_loss;
    });
    r.metadata["network"] = "cirnet";
    r.metadata["lambda_phys"] = cfg.lambda_phys;
    r.metadata["final_data_loss"] = last_data;
    r.metadata["final_physics_loss"] = last_phys;
    r.metadata["collocation_points"] = physics ? collocation.size() : 0;
    return r;
}

SurrogatePair train_pair(const TrainingSet& set, const ConverterParams& cp, const TrainingConfig& cfg,
                         const OperatingEnvelope& env, const ModulationRanges& ranges) {
    TrainResult mod = train_modnet(set, cp, cfg);
    std::vector<OperatingPoint> colloc;
    if (cfg.lambda_phys > 0.0 && cfg.collocation_points > 0) {
        colloc = sample_operating_points(cp, env, set.grid, cfg.collocation_points, cfg.seed + 2,
                                         Strategy::TPS, ranges);
    }
    TrainResult cir = train_cirnet(set, mod.net, cp, cfg, colloc);
    SurrogatePair pair{std::move(mod.net), std::move(cir.net), Normalization::for_converter(cp, set.grid), set.grid,
                       nlohmann::json::object()};
    pair.metadata["config"] = cfg;
    pair.metadata["data_size"] = set.samples.size();
    pair.metadata["provenance"] = std::string(to_string(set.provenance));
    pair.metadata["modnet"] = mod.metadata;
    pair.metadata["cirnet"] = cir.metadata;
    pair.metadata["modnet_history"] = mod.history;
    pair.metadata["cirnet_history"] = cir.history;
    return pair;
}

double select_lambda(const TrainingSet& set, const NetworkParams& modnet, const ConverterParams& cp,
                     const TrainingConfig& cfg, const std::vector<double>& candidates,
                     std::size_t validation_count, const std::vector<OperatingPoint>& collocation,
                     nlohmann::json* log) {
    require(!candidates.empty(), "lambda search needs at least one candidate");
    require(validation_count > 0 && validation_count < set.samples.size(),
            "lambda search needs a nonempty training and validation split");
    TrainingSet train{{set.samples.begin(), set.samples.end() - static_cast<std::ptrdiff_t>(validation_count)},
                      set.grid, set.provenance};
    TrainingSet valid{{set.samples.end() - static_cast<std::ptrdiff_t>(validation_count), set.samples.end()},
                      set.grid, set.provenance};
    double best_lambda = candidates.front();
    double best_mae = std::numeric_limits<double>::infinity();
    nlohmann::json scores = nlohmann::json::array();
    for (const double lambda : candidates) {
        TrainingConfig c = cfg;
        c.lambda_phys = lambda;
        const TrainResult cir = train_cirnet(train, modnet, cp, c, collocation);
        const SurrogatePair pair{modnet, cir.net, Normalization::for_converter(cp, set.grid), set.grid, {}};
        const double mae = evaluate(pair, cp, valid).mae_i_l;
        scores.push_back({{"lambda_phys", lambda}, {"validation_mae_i_l", mae}});
        if (mae < best_mae) {
            best_mae = mae;
            best_lambda = lambda;
        }
    }
    if (log != nullptr) *log = {{"candidates", scores}, {"selected", best_lambda}};
    return best_lambda;
}

// =============================================================================
// Inference
// =============================================================================

std::vector<RolloutResult> rollout_batch(const SurrogatePair& pair, const std::vector<OperatingPoint>& ops,
                                         const ConverterParams& cp, std::size_t steps, const RolloutOptions& opts) {
    require(steps >= 1, "rollout needs at least one step");
    require(!ops.empty(), "rollout needs at least one operating point");
    pair.validate();
    const Normalization& norm = pair.norm;
    const std::size_t n = pair.grid.samples_per_period();
    const std::size_t warm = opts.warmup_periods * n;
    const auto batch = static_cast<Eigen::Index>(ops.size());

    std::vector<Waveform> cmd;
    cmd.reserve(ops.size());
    for (const auto& op : ops) cmd.push_back(commanded(cp, op, pair.grid));

    nn::BatchStepper mod(pair.modnet, batch);
    nn::BatchStepper cir(pair.cirnet, batch);
    Matrix xm(static_cast<Eigen::Index>(kModNetInputs), batch);
    Matrix xc(static_cast<Eigen::Index>(kCirNetInputs), batch);
    Vector prev_p(batch), prev_s(batch), i(batch), warm_sum = Vector::Zero(batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
        const auto bu = static_cast<std::size_t>(b);
        prev_p(b) = opts.init ? opts.init->v_p : cmd[bu].v_p[0];
        prev_s(b) = opts.init ? opts.init->v_s : cmd[bu].v_s[0];
        i(b) = norm.normalize_current(opts.init ? opts.init->i_l : 0.0);
    }

    std::vector<RolloutResult> out(ops.size());
    for (auto& r : out) {
        r.waveform.grid = pair.grid;
        r.waveform.v_p.reserve(steps);
        r.waveform.v_s.reserve(steps);
        r.waveform.i_l.reserve(steps);
    }
    for (std::size_t s = 0; s < warm + steps; ++s) {
        const std::size_t k = s % n;
        if (s == warm && warm > 0 && opts.dc_restore) i -= warm_sum / static_cast<double>(n);

        for (Eigen::Index b = 0; b < batch; ++b) {
            const auto bu = static_cast<std::size_t>(b);
            modnet_features(norm, ops[bu], prev_p(b), prev_s(b), cmd[bu].v_p[k], cmd[bu].v_s[k], xm.col(b));
        }
        const Matrix v = mod.step(xm) + xm.middleRows(kCommandedRow, 2);
        xc.row(0) = i.transpose();
        xc.bottomRows(2) = v;
        const Matrix& y = cir.step(xc);

        for (Eigen::Index b = 0; b < batch; ++b) {
            auto& r = out[static_cast<std::size_t>(b)];
            ++r.modnet_evals;
            ++r.cirnet_evals;
            const double vp = norm.denormalize_voltage(v(0, b));
            const double vs = norm.denormalize_voltage(v(1, b));
            if (s >= warm) {
                r.waveform.v_p.push_back(vp);
                r.waveform.v_s.push_back(vs);
                r.waveform.i_l.push_back(norm.denormalize_current(i(b)));
            } else if (s + n >= warm) {
                warm_sum(b) += i(b);
            }
            i(b) += norm.kappa * y(0, b);
            if (!std::isfinite(i(b)) || !std::isfinite(vp) || !std::isfinite(vs)) {
                throw RolloutDivergedError(fmt::format("rollout diverged at step {}", s), s);
            }
            prev_p(b) = vp;
            prev_s(b) = vs;
        }
    }
    return out;
}

RolloutResult rollout(const SurrogatePair& pair, const OperatingPoint& op, const ConverterParams& cp,
                      std::size_t steps, const RolloutOptions& opts) {
    return rollout_batch(pair, {op}, cp, steps, opts).front();
}

Predictor pair_predictor(const SurrogatePair& pair, const ConverterParams& cp) {
    return [pair, cp](const OperatingPoint& op) {
        return rollout(pair, op, cp, pair.grid.samples_per_period()).waveform;
    };
}

EvalReport evaluate(const Predictor& predict, const ConverterParams& cp, const TrainingSet& holdout) {
    require(!holdout.samples.empty(), "holdout set is empty");
    holdout.validate();
    EvalReport report;
    double square_sum = 0.0;
    std::size_t square_count = 0;
    for (const auto& s : holdout.samples) {
        const Waveform pred = predict(s.op);
        const Waveform& ref = s.waveform;
        if (pred.size() != ref.size() || pred.v_p.size() != ref.size() || pred.v_s.size() != ref.size()) {
            throw DimensionError("prediction length does not match the holdout waveform");
        }
        PointReport pr;
        pr.op = s.op;
        for (std::size_t k = 0; k < ref.size(); ++k) {
            pr.mae_i_l += std::abs(pred.i_l[k] - ref.i_l[k]);
            pr.mae_v += 0.5 * (std::abs(pred.v_p[k] - ref.v_p[k]) + std::abs(pred.v_s[k] - ref.v_s[k]));
        }
        pr.mae_i_l /= static_cast<double>(ref.size());
        pr.mae_v /= static_cast<double>(ref.size());
        const auto r = physics_residual(cp.at_voltages(s.op.v_in, s.op.v_out), pred.i_l, pred.v_p, pred.v_s,
                                        holdout.grid.dt());
        double sq = 0.0;
        for (const double x : r) sq += x * x;
        square_sum += sq;
        square_count += r.size();
        pr.residual_rms = std::sqrt(sq / static_cast<double>(r.size()));
        const auto [plo, phi] = std::minmax_element(pred.i_l.begin(), pred.i_l.end());
        const auto [rlo, rhi] = std::minmax_element(ref.i_l.begin(), ref.i_l.end());
        pr.i_pp_predicted = *phi - *plo;
        pr.i_pp_reference = *rhi - *rlo;
        report.mae_i_l += pr.mae_i_l;
        report.mae_v += pr.mae_v;
        report.points.push_back(pr);
    }
    const double count = static_cast<double>(report.points.size());
    report.mae_i_l /= count;
    report.mae_v /= count;
    report.residual_rms = std::sqrt(square_sum / static_cast<double>(square_count));
    return report;
}

EvalReport evaluate(const SurrogatePair& pair, const ConverterParams& cp, const TrainingSet& holdout) {
    check_grid(holdout.grid, pair.grid);
    return evaluate(pair_predictor(pair, cp), cp, holdout);
}

// =============================================================================
// Serialization
// =============================================================================

void to_json(nlohmann::json& j, const OperatingEnvelope& e) {
    j = {{"v_in_min", e.v_in_min}, {"v_in_max", e.v_in_max}, {"v_out_min", e.v_out_min}, {"v_out_max", e.v_out_max}};
}

void from_json(const nlohmann::json& j, OperatingEnvelope& e) {
    j.at("v_in_min").get_to(e.v_in_min);
    j.at("v_in_max").get_to(e.v_in_max);
    j.at("v_out_min").get_to(e.v_out_min);
    j.at("v_out_max").get_to(e.v_out_max);
    e.validate();
}

void to_json(nlohmann::json& j, const OperatingPoint& op) {
    j = {{"mp", op.mp}, {"v_in", op.v_in}, {"v_out", op.v_out}};
}

void from_json(const nlohmann::json& j, OperatingPoint& op) {
    j.at("mp").get_to(op.mp);
    j.at("v_in").get_to(op.v_in);
    j.at("v_out").get_to(op.v_out);
}

void to_json(nlohmann::json& j, const TrainingConfig& c) {
    j = {{"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"final_lr_fraction", c.final_lr_fraction},
         {"lambda_phys", c.lambda_phys},
         {"seed", c.seed},
         {"patience", c.patience},
         {"hidden", c.hidden},
         {"layer_norm", c.layer_norm},
         {"collocation_points", c.collocation_points},
         {"collocation_refresh", c.collocation_refresh},
         {"sequence_periods", c.sequence_periods}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
    TrainingConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.final_lr_fraction = j.value("final_lr_fraction", d.final_lr_fraction);
    c.lambda_phys = j.value("lambda_phys", d.lambda_phys);
    c.seed = j.value("seed", d.seed);
    c.patience = j.value("patience", d.patience);
    c.hidden = j.value("hidden", d.hidden);
    c.layer_norm = j.value("layer_norm", d.layer_norm);
    c.collocation_points = j.value("collocation_points", d.collocation_points);
    c.collocation_refresh = j.value("collocation_refresh", d.collocation_refresh);
    c.sequence_periods = j.value("sequence_periods", d.sequence_periods);
    c.validate();
}

void to_json(nlohmann::json& j, const Normalization& n) {
    j = {{"v_scale", n.v_scale}, {"i_scale", n.i_scale}, {"kappa", n.kappa}};
}

void from_json(const nlohmann::json& j, Normalization& n) {
    j.at("v_scale").get_to(n.v_scale);
    j.at("i_scale").get_to(n.i_scale);
    j.at("kappa").get_to(n.kappa);
    n.validate();
}

void to_json(nlohmann::json& j, const SurrogatePair& p) {
    const std::uint64_t seed = p.metadata.contains("config") ? p.metadata["config"].value("seed", 0ULL) : 0ULL;
    j = {{"modnet", nn::Checkpoint{p.modnet, seed, {{"role", "modnet"}}}},
         {"cirnet", nn::Checkpoint{p.cirnet, seed + 1, {{"role", "cirnet"}}}},
         {"normalization", p.norm},
         {"grid", p.grid},
         {"metadata", p.metadata}};
}

void from_json(const nlohmann::json& j, SurrogatePair& p) {
    p.modnet = j.at("modnet").get<nn::Checkpoint>().net;
    p.cirnet = j.at("cirnet").get<nn::Checkpoint>().net;
    j.at("normalization").get_to(p.norm);
    j.at("grid").get_to(p.grid);
    p.metadata = j.value("metadata", nlohmann::json::object());
    p.validate();
}

void to_json(nlohmann::json& j, const PointReport& r) {
    j = {{"op", r.op},
         {"mae_i_l", r.mae_i_l},
         {"mae_v", r.mae_v},
         {"residual_rms", r.residual_rms},
         {"i_pp_predicted", r.i_pp_predicted},
         {"i_pp_reference", r.i_pp_reference}};
}

void to_json(nlohmann::json& j, const EvalReport& r) {
    j = {{"mae_i_l", r.mae_i_l}, {"mae_v", r.mae_v}, {"residual_rms", r.residual_rms}, {"points", r.points}};
}

void save_pair(const std::filesystem::path& path, const SurrogatePair& pair) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << nlohmann::json(pair).dump() << '\n';
}

SurrogatePair load_pair(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return nlohmann::json::parse(is).get<SurrogatePair>();
}

}  // namespace dabmod::surrogate
