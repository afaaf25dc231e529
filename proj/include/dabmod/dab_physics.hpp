#pragma once

// =============================================================================
// DAB converter ground-truth engine
// =============================================================================
// Bridge-voltage synthesis for phase-shift modulation, the periodic
// steady-state solution of the leakage-inductor current, an independent RK4
// reference integrator, performance metrics and synthetic switching ringing.
//
// Ratio convention: d0, d1, d2 are fractions of the half switching period
// T_h = 1 / (2 f_s). The primary pulse starts at t = 0 with width d1 * T_h;
// the secondary pulse has width d2 * T_h and is delayed by d0 * T_h. The
// second half period mirrors the first with flipped sign.
// =============================================================================

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dabmod::physics {

// =============================================================================
// Domain types
// =============================================================================

/// Electrical description of the converter.
struct ConverterParams {
    double v_in = 200.0;     ///< primary dc link [V]
    double v_out = 160.0;    ///< secondary dc link [V]
    double n = 1.0;          ///< transformer turns ratio
    double l_lk = 60e-6;     ///< leakage inductance [H]
    double r_l = 0.0;        ///< equivalent inductor resistance [ohm]
    double f_s = 100e3;      ///< switching frequency [Hz]
    double p_rated = 200.0;  ///< rated power [W]

    /// Throws ValidationError naming the first violated bound.
    void validate() const;

    /// Same converter operated at different dc-link voltages.
    [[nodiscard]] ConverterParams at_voltages(double vin, double vout) const;

    bool operator==(const ConverterParams&) const = default;
};

/// The repository fixture: 200 V -> 160 V, 200 W rated, n = 1, 60 uH, 100 kHz.
[[nodiscard]] ConverterParams fixture_converter();

enum class Strategy { SPS, EPS, DPS, TPS };

[[nodiscard]] std::string_view to_string(Strategy s);
/// Accepts "SPS", "EPS", "DPS", "TPS" (case-insensitive).
[[nodiscard]] Strategy strategy_from_string(std::string_view s);

struct ModulationParams {
    Strategy strategy = Strategy::SPS;
    double d0 = 0.0;  ///< outer phase shift, [-1, 1] of T_h
    double d1 = 1.0;  ///< primary pulse width, [0, 1] of T_h
    double d2 = 1.0;  ///< secondary pulse width, [0, 1] of T_h

    [[nodiscard]] static ModulationParams sps(double d0);
    [[nodiscard]] static ModulationParams tps(double d0, double d1, double d2);

    /// Bounds plus the per-strategy structure (SPS: d1 = d2 = 1, EPS: exactly
    /// one inner ratio at 1, DPS: d1 = d2).
    void validate() const;

    bool operator==(const ModulationParams&) const = default;
};

/// Uniform sampling of one switching period.
class SamplingGrid {
public:
    SamplingGrid() = default;
    /// samples_per_period must be even and >= 128; powers of two are the norm.
    SamplingGrid(double f_s, std::size_t samples_per_period = 512);

    [[nodiscard]] static SamplingGrid from_dt(double dt, std::size_t samples_per_period);

    [[nodiscard]] std::size_t samples_per_period() const { return samples_; }
    [[nodiscard]] std::size_t half() const { return samples_ / 2; }
    [[nodiscard]] double dt() const { return dt_; }
    [[nodiscard]] double period() const { return dt_ * static_cast<double>(samples_); }
    [[nodiscard]] double time(std::size_t k) const { return dt_ * static_cast<double>(k); }

    bool operator==(const SamplingGrid&) const = default;

private:
    std::size_t samples_ = 512;
    double dt_ = 1.0 / (100e3 * 512.0);
};

/// Sampled traces over one period. v_s is the secondary bridge voltage before
/// scaling by n.
struct Waveform {
    std::vector<double> v_p;
    std::vector<double> v_s;
    std::vector<double> i_l;
    SamplingGrid grid;

    [[nodiscard]] std::size_t size() const { return i_l.size(); }
};

struct PerformanceMetrics {
    double p_avg = 0.0;
    double i_pp = 0.0;
    double i_rms = 0.0;
    double i_peak = 0.0;
    std::vector<bool> zvs_flags;  ///< primary edges first, then secondary
    bool zvs_complete = true;

    /// Fraction of switching edges with ZVS; 1 when there are no edges.
    [[nodiscard]] double zvs_fraction() const;
};

struct RingingParams {
    double overshoot_fraction = 0.0;
    double ring_freq = 0.0;
    double damping_tau = 0.0;
    bool enabled = false;

    void validate(double f_s) const;
};

enum class Bridge { Primary, Secondary };

struct SwitchingEdge {
    Bridge bridge = Bridge::Primary;
    std::size_t index = 0;
    int direction = 0;     ///< +1 rising, -1 falling
    double current = 0.0;  ///< i_l at the edge sample
    bool zvs = false;
};

// =============================================================================
// Grid alignment
// =============================================================================

/// Sample index (possibly negative) of a ratio of T_h. Throws
/// EdgeAlignmentError if the edge falls between grid points.
[[nodiscard]] std::ptrdiff_t edge_index(double ratio, const SamplingGrid& grid);

/// Rounds every ratio to the nearest representable grid edge.
[[nodiscard]] ModulationParams snap_to_grid(const ModulationParams& mp, const SamplingGrid& grid);

// =============================================================================
// Operations
// =============================================================================

/// v_p and v_s populated, i_l zero.
[[nodiscard]] Waveform synthesize_bridge_voltages(const ConverterParams& cp,
                                                  const ModulationParams& mp,
                                                  const SamplingGrid& grid);

/// Closed-form periodic inductor current for the given modulation.
[[nodiscard]] Waveform solve_steady_state(const ConverterParams& cp,
                                          const ModulationParams& mp,
                                          const SamplingGrid& grid);

/// Closed-form periodic current for arbitrary sample-held bridge voltages.
/// Throws DegenerateDriveError when r_l = 0 and the drive has nonzero mean.
[[nodiscard]] Waveform solve_steady_state(const ConverterParams& cp, const Waveform& voltages);

/// RK4 integration of the inductor equation with the periodic orbit located
/// through the affine one-period map. Independent of the closed form.
[[nodiscard]] Waveform integrate_reference(const ConverterParams& cp,
                                           const ModulationParams& mp,
                                           const SamplingGrid& grid,
                                           std::size_t substeps = 8);

/// Current after one sample interval with constant drive, exact.
[[nodiscard]] double propagate_current(const ConverterParams& cp, double i0, double drive, double h);

/// |i_l| at or below this fraction of max(1, i_pp) counts as zero current.
inline constexpr double kZvsZeroBand = 1e-9;

/// Edges found by quantizing each bridge voltage to {-1, 0, +1} of its dc link.
[[nodiscard]] std::vector<SwitchingEdge> switching_edges(const ConverterParams& cp, const Waveform& w);

/// Default wrap tolerance for compute_metrics, relative to max(1, i_pp).
inline constexpr double kPeriodicityTolerance = 1e-6;

/// Throws NonPeriodicError if |i_l[0] - wrap(i_l[N-1])| exceeds
/// periodicity_tol * max(1, i_pp).
[[nodiscard]] PerformanceMetrics compute_metrics(const ConverterParams& cp,
                                                 const Waveform& w,
                                                 double periodicity_tol = kPeriodicityTolerance);

/// Superimposes decaying oscillations after every bridge-voltage edge.
/// Edges are taken from the input, which must be an ideal (piecewise-constant)
/// waveform. i_l is left untouched.
[[nodiscard]] Waveform apply_ringing(const Waveform& w, const RingingParams& rp, std::uint64_t seed);

/// Forward-flow SPS power for r_l = 0: v_in * n * v_out * d0 (1 - |d0|) / (2 f_s L).
[[nodiscard]] double sps_power(const ConverterParams& cp, double d0);

}  // namespace dabmod::physics
