#include "dabmod/dab_physics.hpp"

#include "dabmod/errors.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <random>

namespace dabmod::physics {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw ValidationError(what);
}

void check_shape(const Waveform& w) {
    const std::size_t n = w.grid.samples_per_period();
    if (w.v_p.size() != n || w.v_s.size() != n || w.i_l.size() != n) {
        throw DimensionError(fmt::format("waveform traces must hold {} samples (v_p={}, v_s={}, i_l={})", n,
                                         w.v_p.size(), w.v_s.size(), w.i_l.size()));
    }
}

std::size_t wrap_index(std::ptrdiff_t k, std::size_t n) {
    const auto sn = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(((k % sn) + sn) % sn);
}

// Level of a bridge voltage relative to its dc link: -1, 0 or +1.
int quantize_level(double v, double v_dc) {
    if (v > 0.5 * v_dc) return 1;
    if (v < -0.5 * v_dc) return -1;
    return 0;
}

// Three-level half-wave symmetric pulse train: +amp on [shift, shift + width)
// and -amp half a period later.
void fill_pulse_train(std::vector<double>& out, std::size_t n, std::ptrdiff_t shift, std::size_t width,
                      double amp) {
    const std::size_t half = n / 2;
    out.assign(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t m = wrap_index(static_cast<std::ptrdiff_t>(k) - shift, n);
        const std::size_t local = m % half;
        if (local < width) out[k] = m < half ? amp : -amp;
    }
}

}  // namespace

// =============================================================================
// Domain types
// =============================================================================

void ConverterParams::validate() const {
    require(std::isfinite(v_in) && v_in > 0, fmt::format("v_in must be > 0 (got {})", v_in));
    require(std::isfinite(v_out) && v_out > 0, fmt::format("v_out must be > 0 (got {})", v_out));
    require(std::isfinite(n) && n > 0, fmt::format("n must be > 0 (got {})", n));
    require(std::isfinite(l_lk) && l_lk > 0, fmt::format("l_lk must be > 0 (got {})", l_lk));
    require(std::isfinite(r_l) && r_l >= 0, fmt::format("r_l must be >= 0 (got {})", r_l));
    require(std::isfinite(f_s) && f_s > 0, fmt::format("f_s must be > 0 (got {})", f_s));
    require(std::isfinite(p_rated) && p_rated > 0, fmt::format("p_rated must be > 0 (got {})", p_rated));
}

ConverterParams ConverterParams::at_voltages(double vin, double vout) const {
    ConverterParams cp = *this;
    cp.v_in = vin;
    cp.v_out = vout;
    return cp;
}

ConverterParams fixture_converter() {
    return ConverterParams{};
}

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::SPS: return "SPS";
        case Strategy::EPS: return "EPS";
        case Strategy::DPS: return "DPS";
        case Strategy::TPS: return "TPS";
    }
    return "?";
}

Strategy strategy_from_string(std::string_view s) {
    std::string up(s);
    std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
    if (up == "SPS") return Strategy::SPS;
    if (up == "EPS") return Strategy::EPS;
    if (up == "DPS") return Strategy::DPS;
    if (up == "TPS") return Strategy::TPS;
    throw ValidationError(fmt::format("unknown modulation strategy '{}'", s));
}

ModulationParams ModulationParams::sps(double d0) {
    return {Strategy::SPS, d0, 1.0, 1.0};
}

ModulationParams ModulationParams::tps(double d0, double d1, double d2) {
    return {Strategy::TPS, d0, d1, d2};
}

void ModulationParams::validate() const {
    require(std::isfinite(d0) && d0 >= -1.0 && d0 <= 1.0, fmt::format("d0 must lie in [-1, 1] (got {})", d0));
    require(std::isfinite(d1) && d1 >= 0.0 && d1 <= 1.0, fmt::format("d1 must lie in [0, 1] (got {})", d1));
    require(std::isfinite(d2) && d2 >= 0.0 && d2 <= 1.0, fmt::format("d2 must lie in [0, 1] (got {})", d2));
    switch (strategy) {
        case Strategy::SPS:
            require(d1 == 1.0 && d2 == 1.0, "SPS requires d1 = d2 = 1");
            break;
        case Strategy::EPS:
            require((d1 == 1.0) != (d2 == 1.0), "EPS requires exactly one of d1, d2 to equal 1");
            break;
        case Strategy::DPS:
            require(d1 == d2, "DPS requires d1 = d2");
            break;
        case Strategy::TPS:
            break;
    }
}

SamplingGrid::SamplingGrid(double f_s, std::size_t samples_per_period) : samples_(samples_per_period) {
    require(std::isfinite(f_s) && f_s > 0, "grid frequency must be > 0");
    require(samples_per_period >= 128 && samples_per_period % 2 == 0,
            fmt::format("samples_per_period must be even and >= 128 (got {})", samples_per_period));
    dt_ = 1.0 / (f_s * static_cast<double>(samples_per_period));
}

SamplingGrid SamplingGrid::from_dt(double dt, std::size_t samples_per_period) {
    require(std::isfinite(dt) && dt > 0, "grid dt must be > 0");
    SamplingGrid g(1.0 / (dt * static_cast<double>(samples_per_period)), samples_per_period);
    g.dt_ = dt;
    return g;
}

double PerformanceMetrics::zvs_fraction() const {
    if (zvs_flags.empty()) return 1.0;
    const auto ok = std::count(zvs_flags.begin(), zvs_flags.end(), true);
    return static_cast<double>(ok) / static_cast<double>(zvs_flags.size());
}

void RingingParams::validate(double f_s) const {
    require(overshoot_fraction >= 0.0 && overshoot_fraction <= 0.3,
            fmt::format("overshoot_fraction must lie in [0, 0.3] (got {})", overshoot_fraction));
    if (!enabled) return;
    require(ring_freq > f_s, fmt::format("ring_freq must exceed f_s = {} (got {})", f_s, ring_freq));
    require(damping_tau > 0.0, "damping_tau must be > 0");
}

// =============================================================================
// Grid alignment
// =============================================================================

std::ptrdiff_t edge_index(double ratio, const SamplingGrid& grid) {
    const double pos = ratio * static_cast<double>(grid.half());
    const double rounded = std::round(pos);
    if (std::abs(pos - rounded) > 1e-9) {
        throw EdgeAlignmentError(fmt::format("ratio {} puts an edge at sample {} which is not on the {}-sample grid",
                                             ratio, pos, grid.samples_per_period()));
    }
    return static_cast<std::ptrdiff_t>(rounded);
}

ModulationParams snap_to_grid(const ModulationParams& mp, const SamplingGrid& grid) {
    const double half = static_cast<double>(grid.half());
    auto snap = [half](double r) { return std::round(r * half) / half; };
    ModulationParams out = mp;
    out.d0 = snap(mp.d0);
    out.d1 = snap(mp.d1);
    out.d2 = snap(mp.d2);
    if (mp.strategy == Strategy::DPS) out.d2 = out.d1;
    return out;
}

// =============================================================================
// Operations
// =============================================================================

Waveform synthesize_bridge_voltages(const ConverterParams& cp, const ModulationParams& mp,
                                    const SamplingGrid& grid) {
    cp.validate();
    mp.validate();
    const std::size_t n = grid.samples_per_period();
    const auto width_p = static_cast<std::size_t>(edge_index(mp.d1, grid));
    const auto width_s = static_cast<std::size_t>(edge_index(mp.d2, grid));
    const std::ptrdiff_t shift = edge_index(mp.d0, grid);

    Waveform w;
    w.grid = grid;
    fill_pulse_train(w.v_p, n, 0, width_p, cp.v_in);
    fill_pulse_train(w.v_s, n, shift, width_s, cp.v_out);
    w.i_l.assign(n, 0.0);
    return w;
}

double propagate_current(const ConverterParams& cp, double i0, double drive, double h) {
    if (cp.r_l == 0.0) return i0 + drive * h / cp.l_lk;
    const double x = cp.r_l * h / cp.l_lk;
    // i0 a + (u / R)(1 - a), with 1 - a = -expm1(-x)
    return i0 * std::exp(-x) - (drive / cp.r_l) * std::expm1(-x);
}

Waveform solve_steady_state(const ConverterParams& cp, const Waveform& voltages) {
    cp.validate();
    const std::size_t n = voltages.grid.samples_per_period();
    if (voltages.v_p.size() != n || voltages.v_s.size() != n) {
        throw DimensionError("bridge voltages must cover one grid period");
    }
    const double dt = voltages.grid.dt();

    std::vector<double> drive(n);
    for (std::size_t k = 0; k < n; ++k) drive[k] = voltages.v_p[k] - cp.n * voltages.v_s[k];

    // Segments of constant drive.
    struct Segment {
        std::size_t begin;
        std::size_t length;
        double u;
    };
    std::vector<Segment> segments;
    for (std::size_t k = 0; k < n; ++k) {
        if (k == 0 || drive[k] != drive[k - 1]) {
            segments.push_back({k, 1, drive[k]});
        } else {
            ++segments.back().length;
        }
    }

    // One-period affine map i(T) = a_tot * i(0) + b_tot.
    double a_tot = 1.0;
    double b_tot = 0.0;
    double drive_scale = 0.0;
    for (const Segment& s : segments) {
        const double h = dt * static_cast<double>(s.length);
        const double a = cp.r_l == 0.0 ? 1.0 : std::exp(-cp.r_l * h / cp.l_lk);
        b_tot = a * b_tot + propagate_current(cp, 0.0, s.u, h);
        a_tot *= a;
        drive_scale += std::abs(s.u) * h / cp.l_lk;
    }

    double i0 = 0.0;
    if (cp.r_l == 0.0) {
        if (std::abs(b_tot) > 1e-9 * std::max(drive_scale, 1e-300)) {
            throw DegenerateDriveError(fmt::format(
                "lossless inductor with nonzero mean drive ({} A net change per period) has no periodic solution",
                b_tot));
        }
    } else {
        const double one_minus_a = -std::expm1(-cp.r_l * voltages.grid.period() / cp.l_lk);
        i0 = b_tot / one_minus_a;
    }

    Waveform w = voltages;
    w.i_l.assign(n, 0.0);
    double i_start = i0;
    for (const Segment& s : segments) {
        for (std::size_t j = 0; j < s.length; ++j) {
            w.i_l[s.begin + j] = propagate_current(cp, i_start, s.u, dt * static_cast<double>(j));
        }
        i_start = propagate_current(cp, i_start, s.u, dt * static_cast<double>(s.length));
    }

    if (cp.r_l == 0.0) {
        // Any constant offset is periodic; pick the zero-mean (half-wave
        // antisymmetric) member.
        double mean = 0.0;
        for (double i : w.i_l) mean += i;
        mean /= static_cast<double>(n);
        for (double& i : w.i_l) i -= mean;
    }
    return w;
}

Waveform solve_steady_state(const ConverterParams& cp, const ModulationParams& mp, const SamplingGrid& grid) {
    return solve_steady_state(cp, synthesize_bridge_voltages(cp, mp, grid));
}

Waveform integrate_reference(const ConverterParams& cp, const ModulationParams& mp, const SamplingGrid& grid,
                             std::size_t substeps) {
    Waveform w = synthesize_bridge_voltages(cp, mp, grid);
    const std::size_t n = grid.samples_per_period();
    substeps = std::max<std::size_t>(substeps, 1);
    const double h = grid.dt() / static_cast<double>(substeps);

    auto rhs = [&](double i, double u) { return (u - cp.r_l * i) / cp.l_lk; };

    // Drive is held over each sample, so the RK4 stages never straddle an edge.
    auto run = [&](double i0, std::vector<double>* trace) {
        double i = i0;
        for (std::size_t k = 0; k < n; ++k) {
            if (trace != nullptr) (*trace)[k] = i;
            const double u = w.v_p[k] - cp.n * w.v_s[k];
            for (std::size_t s = 0; s < substeps; ++s) {
                const double k1 = rhs(i, u);
                const double k2 = rhs(i + 0.5 * h * k1, u);
                const double k3 = rhs(i + 0.5 * h * k2, u);
                const double k4 = rhs(i + h * k3, u);
                i += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        return i;
    };

    const double b = run(0.0, nullptr);
    const double a = run(1.0, nullptr) - b;

    std::vector<double> trace(n);
    double i0 = 0.0;
    if (cp.r_l == 0.0) {
        // Pure translation map: every offset is periodic if the drift vanishes.
        run(0.0, &trace);
        double peak = 0.0;
        for (double i : trace) peak = std::max(peak, std::abs(i));
        if (std::abs(b) > 1e-9 * std::max(1.0, peak)) {
            throw OracleDivergenceError(
                fmt::format("reference integration drifts by {} A per period on a lossless inductor", b));
        }
        double mean = 0.0;
        for (double i : trace) mean += i;
        i0 = -mean / static_cast<double>(n);
    } else {
        i0 = b / (1.0 - a);
    }

    const double i_end = run(i0, &trace);
    const auto [lo, hi] = std::minmax_element(trace.begin(), trace.end());
    const double i_pp = *hi - *lo;
    if (!std::isfinite(i_end) || std::abs(i_end - i0) >= 1e-9 * std::max(1.0, i_pp)) {
        throw OracleDivergenceError(
            fmt::format("reference orbit does not close: |i(T) - i(0)| = {}", std::abs(i_end - i0)));
    }
    w.i_l = std::move(trace);
    return w;
}

std::vector<SwitchingEdge> switching_edges(const ConverterParams& cp, const Waveform& w) {
    check_shape(w);
    const std::size_t n = w.grid.samples_per_period();
    const auto [lo, hi] = std::minmax_element(w.i_l.begin(), w.i_l.end());
    // Currents within rounding of zero count as zero.
    const double zero_band = kZvsZeroBand * std::max(1.0, *hi - *lo);
    std::vector<SwitchingEdge> edges;
    auto scan = [&](const std::vector<double>& v, double v_dc, Bridge bridge) {
        for (std::size_t k = 0; k < n; ++k) {
            const int prev = quantize_level(v[(k + n - 1) % n], v_dc);
            const int cur = quantize_level(v[k], v_dc);
            if (cur == prev) continue;
            SwitchingEdge e;
            e.bridge = bridge;
            e.index = k;
            e.direction = cur > prev ? 1 : -1;
            e.current = w.i_l[k];
            // Primary turn-on is soft when the current flows against the edge;
            // secondary when it flows with it. Zero current is a failure.
            const double signed_current = e.current * static_cast<double>(e.direction);
            e.zvs = bridge == Bridge::Primary ? signed_current < -zero_band : signed_current > zero_band;
            edges.push_back(e);
        }
    };
    scan(w.v_p, cp.v_in, Bridge::Primary);
    scan(w.v_s, cp.v_out, Bridge::Secondary);
    return edges;
}

PerformanceMetrics compute_metrics(const ConverterParams& cp, const Waveform& w, double periodicity_tol) {
    cp.validate();
    check_shape(w);
    const std::size_t n = w.grid.samples_per_period();
    const double dt = w.grid.dt();

    PerformanceMetrics m;
    const auto [lo, hi] = std::minmax_element(w.i_l.begin(), w.i_l.end());
    m.i_pp = *hi - *lo;

    const double wrap = propagate_current(cp, w.i_l[n - 1], w.v_p[n - 1] - cp.n * w.v_s[n - 1], dt);
    const double mismatch = std::abs(w.i_l[0] - wrap);
    if (!(mismatch <= periodicity_tol * std::max(1.0, m.i_pp))) {
        throw NonPeriodicError(fmt::format("waveform is not periodic: wrap mismatch {} A", mismatch));
    }

    // Sample-held voltage times linearly interpolated current: exact for the
    // lossless piecewise-linear solution.
    double energy = 0.0;
    double square = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double a = w.i_l[k];
        const double b = w.i_l[(k + 1) % n];
        energy += w.v_p[k] * 0.5 * (a + b);
        square += (a * a + a * b + b * b) / 3.0;
        m.i_peak = std::max(m.i_peak, std::abs(a));
    }
    m.p_avg = energy / static_cast<double>(n);
    m.i_rms = std::sqrt(square / static_cast<double>(n));
    m.i_rms = std::min(m.i_rms, m.i_peak);

    for (const SwitchingEdge& e : switching_edges(cp, w)) m.zvs_flags.push_back(e.zvs);
    m.zvs_complete = std::all_of(m.zvs_flags.begin(), m.zvs_flags.end(), [](bool b) { return b; });
    return m;
}

Waveform apply_ringing(const Waveform& w, const RingingParams& rp, std::uint64_t seed) {
    rp.validate(1.0 / w.grid.period());
    if (!rp.enabled || rp.overshoot_fraction == 0.0) return w;
    check_shape(w);

    const std::size_t n = w.grid.samples_per_period();
    const double dt = w.grid.dt();
    const double omega = 2.0 * std::numbers::pi * rp.ring_freq;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(0.75, 1.0);

    auto ring = [&](const std::vector<double>& ideal) {
        std::vector<double> out = ideal;
        for (std::size_t e = 0; e < n; ++e) {
            const double step = ideal[e] - ideal[(e + n - 1) % n];
            if (step == 0.0) continue;
            const double amp = rp.overshoot_fraction * jitter(rng) * step;
            for (std::size_t j = 0; j < n; ++j) {
                const double tau = dt * static_cast<double>((j + n - e) % n);
                out[j] += amp * std::exp(-tau / rp.damping_tau) * std::cos(omega * tau);
            }
        }
        return out;
    };

    Waveform out = w;
    out.v_p = ring(w.v_p);
    out.v_s = ring(w.v_s);
    return out;
}

double sps_power(const ConverterParams& cp, double d0) {
    return cp.v_in * cp.n * cp.v_out * d0 * (1.0 - std::abs(d0)) / (2.0 * cp.f_s * cp.l_lk);
}

}  // namespace dabmod::physics
