#include "dabmod/optimizer.hpp"

#include "dabmod/errors.hpp"
#include "dabmod/physics_io.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace dabmod::optimizer {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw ValidationError(message);
}

std::string lower_case(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

/// Ratio index on a grid: a ratio r of T_h sits at sample r * N / 2.
double half_samples(const SamplingGrid& grid) {
    return static_cast<double>(grid.half());
}

/// Nearest grid ratio inside [lo, hi]; `cap` bounds the index from above.
double snap_ratio(double r, double lo, double hi, const SamplingGrid& grid, double cap_index) {
    const double h = half_samples(grid);
    const double first = std::ceil(lo * h - 1e-9);
    const double last = std::min(std::floor(hi * h + 1e-9), cap_index);
    if (first > last) {
        throw ValidationError(
            fmt::format("no {}-sample grid point lies in [{}, {}]", grid.samples_per_period(), lo, hi));
    }
    return std::clamp(std::round(r * h), first, last) / h;
}

OperatingPoint at_converter(const ConverterParams& cp, const ModulationParams& mp) {
    return {mp, cp.v_in, cp.v_out};
}

}  // namespace

// =============================================================================
// Problem definition
// =============================================================================

std::string_view to_string(Goal g) {
    switch (g) {
        case Goal::MinCurrentStress: return "min_current_stress";
        case Goal::MinRmsCurrent: return "min_rms_current";
        case Goal::MaxZvsRange: return "max_zvs_range";
    }
    return "min_current_stress";
}

Goal goal_from_string(std::string_view s) {
    const std::string l = lower_case(s);
    if (l == "min_current_stress") return Goal::MinCurrentStress;
    if (l == "min_rms_current") return Goal::MinRmsCurrent;
    if (l == "max_zvs_range") return Goal::MaxZvsRange;
    throw ValidationError(fmt::format("unknown objective '{}'", s));
}

SearchSpace SearchSpace::for_strategy(Strategy s, double d_min) {
    SearchSpace space;
    space.strategy = s;
    space.d_min = d_min;
    space.validate();
    return space;
}

std::size_t SearchSpace::dimensions() const {
    switch (strategy) {
        case Strategy::SPS: return 1;
        case Strategy::EPS:
        case Strategy::DPS: return 2;
        case Strategy::TPS: return 3;
    }
    return 3;
}

std::vector<double> SearchSpace::lower() const {
    std::vector<double> lo{d0_min};
    for (std::size_t i = 1; i < dimensions(); ++i) lo.push_back(d_min);
    return lo;
}

std::vector<double> SearchSpace::upper() const {
    std::vector<double> hi{d0_max};
    for (std::size_t i = 1; i < dimensions(); ++i) hi.push_back(d_max);
    return hi;
}

ModulationParams SearchSpace::to_modulation(const std::vector<double>& x) const {
    if (x.size() != dimensions()) {
        throw DimensionError(fmt::format("{} candidate needs {} coordinates, got {}", physics::to_string(strategy),
                                         dimensions(), x.size()));
    }
    switch (strategy) {
        case Strategy::SPS: return ModulationParams::sps(x[0]);
        case Strategy::EPS: return {Strategy::EPS, x[0], x[1], 1.0};
        case Strategy::DPS: return {Strategy::DPS, x[0], x[1], x[1]};
        case Strategy::TPS: return ModulationParams::tps(x[0], x[1], x[2]);
    }
    return ModulationParams::tps(x[0], x[1], x[2]);
}

std::vector<double> SearchSpace::from_modulation(const ModulationParams& mp) const {
    switch (strategy) {
        case Strategy::SPS: return {mp.d0};
        case Strategy::EPS: return {mp.d0, mp.d1};
        case Strategy::DPS: return {mp.d0, mp.d1};
        case Strategy::TPS: return {mp.d0, mp.d1, mp.d2};
    }
    return {mp.d0, mp.d1, mp.d2};
}

ModulationParams SearchSpace::snap(const ModulationParams& mp, const SamplingGrid& grid) const {
    const double h = half_samples(grid);
    const double full = h;
    ModulationParams out = mp;
    out.strategy = strategy;
    out.d0 = snap_ratio(mp.d0, d0_min, d0_max, grid, full);
    switch (strategy) {
        case Strategy::SPS:
            out.d1 = out.d2 = 1.0;
            break;
        case Strategy::EPS:
            // EPS keeps the primary pulse strictly shorter than a half period.
            out.d1 = snap_ratio(mp.d1, d_min, d_max, grid, full - 1.0);
            out.d2 = 1.0;
            break;
        case Strategy::DPS:
            out.d1 = snap_ratio(mp.d1, d_min, d_max, grid, full);
            out.d2 = out.d1;
            break;
        case Strategy::TPS:
            out.d1 = snap_ratio(mp.d1, d_min, d_max, grid, full);
            out.d2 = snap_ratio(mp.d2, d_min, d_max, grid, full);
            break;
    }
    return out;
}

void SearchSpace::validate() const {
    require(std::isfinite(d0_min) && std::isfinite(d0_max) && d0_min >= -1.0 && d0_max <= 1.0 && d0_min <= d0_max,
            fmt::format("d0 bounds [{}, {}] must be ordered inside [-1, 1]", d0_min, d0_max));
    require(std::isfinite(d_min) && std::isfinite(d_max) && d_min > 0.0 && d_max <= 1.0 && d_min <= d_max,
            fmt::format("inner ratio bounds [{}, {}] must be ordered inside (0, 1]", d_min, d_max));
}

void ObjectiveSpec::validate(const ConverterParams& cp) const {
    require(std::isfinite(target_power) && target_power > 0.0 && target_power <= cp.p_rated,
            fmt::format("target_power = {} outside (0, {}]", target_power, cp.p_rated));
    require(std::isfinite(power_tolerance) && power_tolerance >= 0.0, "power tolerance must be >= 0");
    require(std::isfinite(penalty_weight) && penalty_weight > 0.0, "penalty weight must be > 0");
}

// =============================================================================
// Evaluators
// =============================================================================

Evaluator::Evaluator(std::string tag, SamplingGrid grid, BatchFunction fn)
    : tag_(std::move(tag)), grid_(grid), fn_(std::move(fn)), state_(std::make_shared<State>()) {
    require(static_cast<bool>(fn_), "evaluator needs a function");
}

Evaluator Evaluator::oracle(const SamplingGrid& grid) {
    return Evaluator("oracle", grid, [grid](const ConverterParams& cp, const std::vector<OperatingPoint>& ops) {
        std::vector<PerformanceMetrics> out;
        out.reserve(ops.size());
        for (const auto& op : ops) {
            const ConverterParams cpo = cp.at_voltages(op.v_in, op.v_out);
            out.push_back(physics::compute_metrics(cpo, physics::solve_steady_state(cpo, op.mp, grid)));
        }
        return out;
    });
}

Evaluator Evaluator::surrogate(std::shared_ptr<const surrogate::SurrogatePair> pair) {
    require(pair != nullptr, "surrogate evaluator needs a pair");
    pair->validate();
    const SamplingGrid grid = pair->grid;
    return Evaluator("surrogate", grid, [pair](const ConverterParams& cp, const std::vector<OperatingPoint>& ops) {
        const auto runs = surrogate::rollout_batch(*pair, ops, cp, pair->grid.samples_per_period());
        std::vector<PerformanceMetrics> out;
        out.reserve(ops.size());
        for (std::size_t b = 0; b < ops.size(); ++b) {
            // Predicted periods are not exactly periodic; skip the wrap check.
            out.push_back(physics::compute_metrics(cp.at_voltages(ops[b].v_in, ops[b].v_out), runs[b].waveform,
                                                   std::numeric_limits<double>::infinity()));
        }
        return out;
    });
}

PerformanceMetrics Evaluator::evaluate(const ConverterParams& cp, const OperatingPoint& op) const {
    return evaluate(cp, std::vector<OperatingPoint>{op}).front();
}

std::vector<PerformanceMetrics> Evaluator::evaluate(const ConverterParams& cp,
                                                    const std::vector<OperatingPoint>& ops) const {
    auto key = [&](const OperatingPoint& op) {
        return Key{cp.n, cp.l_lk, cp.r_l, cp.f_s, op.v_in, op.v_out, static_cast<double>(op.mp.strategy),
                   op.mp.d0, op.mp.d1, op.mp.d2};
    };
    state_->requests += ops.size();
    std::vector<OperatingPoint> missing;
    std::vector<Key> missing_keys;
    for (const auto& op : ops) {
        const Key k = key(op);
        if (state_->cache.count(k) == 0 && std::find(missing_keys.begin(), missing_keys.end(), k) == missing_keys.end()) {
            missing.push_back(op);
            missing_keys.push_back(k);
        }
    }
    if (!missing.empty()) {
        std::vector<PerformanceMetrics> fresh;
        try {
            fresh = fn_(cp, missing);
        } catch (const std::exception& e) {
            // Find the failing candidate so the error can name it.
            for (const auto& op : missing) {
                try {
                    (void)fn_(cp, {op});
                } catch (const std::exception& inner) {
                    throw CandidateEvaluationError(
                        fmt::format("{} evaluator failed at d0={}, d1={}, d2={}: {}", tag_, op.mp.d0, op.mp.d1,
                                    op.mp.d2, inner.what()),
                        op);
                }
            }
            throw CandidateEvaluationError(fmt::format("{} evaluator failed: {}", tag_, e.what()), missing.front());
        }
        if (fresh.size() != missing.size()) throw DimensionError("evaluator returned the wrong number of results");
        state_->computed += missing.size();
        for (std::size_t i = 0; i < missing.size(); ++i) state_->cache.emplace(missing_keys[i], std::move(fresh[i]));
    }
    std::vector<PerformanceMetrics> out;
    out.reserve(ops.size());
    for (const auto& op : ops) out.push_back(state_->cache.at(key(op)));
    return out;
}

double objective_value(const PerformanceMetrics& m, const ObjectiveSpec& obj, const ConverterParams& cp) {
    const double i_base = obj.target_power / cp.v_out;
    switch (obj.goal) {
        case Goal::MinCurrentStress: return m.i_pp / i_base;
        case Goal::MinRmsCurrent: return m.i_rms / i_base;
        case Goal::MaxZvsRange: return 1.0 - m.zvs_fraction();
    }
    return m.i_pp / i_base;
}

double power_penalty(const PerformanceMetrics& m, const ObjectiveSpec& obj) {
    const double excess = std::abs(m.p_avg - obj.target_power) / obj.target_power - obj.power_tolerance;
    return excess > 0.0 ? obj.penalty_weight * excess * excess : 0.0;
}

double fitness(const PerformanceMetrics& m, const ObjectiveSpec& obj, const ConverterParams& cp) {
    return objective_value(m, obj, cp) + power_penalty(m, obj);
}

bool power_feasible(const PerformanceMetrics& m, const ObjectiveSpec& obj) {
    return std::abs(m.p_avg - obj.target_power) <= obj.power_tolerance * obj.target_power * (1.0 + 1e-12);
}

double evaluate_candidate(const Evaluator& ev, const ConverterParams& cp, const ModulationParams& mp,
                          const ObjectiveSpec& obj) {
    obj.validate(cp);
    return fitness(ev.evaluate(cp, at_converter(cp, mp)), obj, cp);
}

// =============================================================================
// Box-constrained minimizers
// =============================================================================

void Box::validate() const {
    require(lower.size() == upper.size(), "box bounds must have equal sizes");
    for (std::size_t d = 0; d < lower.size(); ++d) {
        require(std::isfinite(lower[d]) && std::isfinite(upper[d]) && lower[d] <= upper[d],
                fmt::format("box dimension {} has bounds [{}, {}]", d, lower[d], upper[d]));
    }
}

void PsoConfig::validate() const {
    require(swarm_size > 0 && iterations > 0, "PSO budget must be > 0");
    require(inertia >= 0.0 && cognitive >= 0.0 && social >= 0.0, "PSO coefficients must be >= 0");
}

void GaConfig::validate() const {
    require(population >= 2 && generations > 0, "GA needs a population of at least 2 and generations > 0");
    require(tournament >= 1, "tournament size must be >= 1");
    require(elites < population, "elites must be fewer than the population");
    require(crossover_probability >= 0.0 && crossover_probability <= 1.0, "crossover probability must be in [0, 1]");
    require(mutation_probability >= 0.0 && mutation_probability <= 1.0, "mutation probability must be in [0, 1]");
    require(crossover_eta >= 0.0 && mutation_eta >= 0.0, "distribution indices must be >= 0");
}

namespace {

std::vector<Point> initial_population(const Box& box, std::size_t count, const std::vector<Point>& initial,
                                      std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Point> pop;
    pop.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Point x(box.dimensions());
        if (i < initial.size()) {
            if (initial[i].size() != box.dimensions()) throw DimensionError("initial point has the wrong dimension");
            for (std::size_t d = 0; d < x.size(); ++d) x[d] = std::clamp(initial[i][d], box.lower[d], box.upper[d]);
        } else {
            for (std::size_t d = 0; d < x.size(); ++d) x[d] = box.lower[d] + (box.upper[d] - box.lower[d]) * u(rng);
        }
        pop.push_back(std::move(x));
    }
    return pop;
}

std::vector<double> checked(const BatchObjective& f, const std::vector<Point>& xs) {
    std::vector<double> values = f(xs);
    if (values.size() != xs.size()) throw DimensionError("objective returned the wrong number of values");
    return values;
}

/// Reflects x into [lo, hi]; flips the velocity on every reflection.
void reflect(double& x, double& v, double lo, double hi) {
    if (lo == hi) {
        x = lo;
        v = 0.0;
        return;
    }
    for (int guard = 0; guard < 8 && (x < lo || x > hi); ++guard) {
        if (x < lo) x = 2.0 * lo - x;
        if (x > hi) x = 2.0 * hi - x;
        v = -v;
    }
    x = std::clamp(x, lo, hi);
}

}  // namespace

MinimizeResult pso_minimize(const Box& box, const BatchObjective& f, const PsoConfig& cfg,
                            const std::vector<Point>& initial) {
    box.validate();
    cfg.validate();
    MinimizeResult r;
    const std::size_t dims = box.dimensions();
    if (dims == 0) {
        r.best_fitness = checked(f, {Point{}}).front();
        r.history.push_back(r.best_fitness);
        r.evaluations = 1;
        return r;
    }
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    std::vector<Point> x = initial_population(box, cfg.swarm_size, initial, rng);
    std::vector<Point> v(cfg.swarm_size, Point(dims));
    for (std::size_t i = 0; i < cfg.swarm_size; ++i) {
        for (std::size_t d = 0; d < dims; ++d) {
            const double range = box.upper[d] - box.lower[d];
            v[i][d] = (u(rng) - 0.5) * range;
        }
    }
    std::vector<double> fx = checked(f, x);
    r.evaluations += x.size();
    std::vector<Point> pbest = x;
    std::vector<double> pbest_f = fx;
    std::size_t g = static_cast<std::size_t>(std::min_element(fx.begin(), fx.end()) - fx.begin());
    r.best = x[g];
    r.best_fitness = fx[g];
    r.history.push_back(r.best_fitness);

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        for (std::size_t i = 0; i < cfg.swarm_size; ++i) {
            for (std::size_t d = 0; d < dims; ++d) {
                const double range = box.upper[d] - box.lower[d];
                const double r1 = u(rng);
                const double r2 = u(rng);
                double vel = cfg.inertia * v[i][d] + cfg.cognitive * r1 * (pbest[i][d] - x[i][d]) +
                             cfg.social * r2 * (r.best[d] - x[i][d]);
                vel = std::clamp(vel, -range, range);
                double pos = x[i][d] + vel;
                reflect(pos, vel, box.lower[d], box.upper[d]);
                x[i][d] = pos;
                v[i][d] = vel;
            }
        }
        fx = checked(f, x);
        r.evaluations += x.size();
        for (std::size_t i = 0; i < cfg.swarm_size; ++i) {
            if (fx[i] < pbest_f[i]) {
                pbest_f[i] = fx[i];
                pbest[i] = x[i];
            }
            if (fx[i] < r.best_fitness) {
                r.best_fitness = fx[i];
                r.best = x[i];
            }
        }
        r.history.push_back(r.best_fitness);
    }
    return r;
}

namespace {

std::size_t tournament(const std::vector<double>& fit, std::size_t k, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, fit.size() - 1);
    std::size_t best = pick(rng);
    for (std::size_t i = 1; i < k; ++i) {
        const std::size_t c = pick(rng);
        if (fit[c] < fit[best]) best = c;
    }
    return best;
}

/// Bounded simulated binary crossover on one gene pair.
void sbx(double& a, double& b, double lo, double hi, double eta, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (std::abs(a - b) < 1e-14 || lo == hi) return;
    const double y1 = std::min(a, b);
    const double y2 = std::max(a, b);
    const double span = y2 - y1;
    const double rand = u(rng);
    auto spread = [&](double beta) {
        const double alpha = 2.0 - std::pow(beta, -(eta + 1.0));
        return rand <= 1.0 / alpha ? std::pow(rand * alpha, 1.0 / (eta + 1.0))
                                   : std::pow(1.0 / (2.0 - rand * alpha), 1.0 / (eta + 1.0));
    };
    const double c1 = 0.5 * (y1 + y2 - spread(1.0 + 2.0 * (y1 - lo) / span) * span);
    const double c2 = 0.5 * (y1 + y2 + spread(1.0 + 2.0 * (hi - y2) / span) * span);
    a = std::clamp(c1, lo, hi);
    b = std::clamp(c2, lo, hi);
    if (u(rng) < 0.5) std::swap(a, b);
}

/// Polynomial mutation of one gene.
void polynomial_mutation(double& y, double lo, double hi, double eta, std::mt19937_64& rng) {
    if (lo == hi) return;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double range = hi - lo;
    const double d1 = (y - lo) / range;
    const double d2 = (hi - y) / range;
    const double r = u(rng);
    const double power = 1.0 / (eta + 1.0);
    double dq = 0.0;
    if (r < 0.5) {
        const double val = 2.0 * r + (1.0 - 2.0 * r) * std::pow(1.0 - d1, eta + 1.0);
        dq = std::pow(val, power) - 1.0;
    } else {
        const double val = 2.0 * (1.0 - r) + 2.0 * (r - 0.5) * std::pow(1.0 - d2, eta + 1.0);
        dq = 1.0 - std::pow(val, power);
    }
    y = std::clamp(y + dq * range, lo, hi);
}

}  // namespace

MinimizeResult ga_minimize(const Box& box, const BatchObjective& f, const GaConfig& cfg,
                           const std::vector<Point>& initial) {
    box.validate();
    cfg.validate();
    MinimizeResult r;
    const std::size_t dims = box.dimensions();
    if (dims == 0) {
        r.best_fitness = checked(f, {Point{}}).front();
        r.history.push_back(r.best_fitness);
        r.evaluations = 1;
        return r;
    }
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double pm = cfg.mutation_probability > 0.0 ? cfg.mutation_probability : 1.0 / static_cast<double>(dims);

    std::vector<Point> pop = initial_population(box, cfg.population, initial, rng);
    std::vector<double> fit = checked(f, pop);
    r.evaluations += pop.size();
    auto track = [&]() {
        const auto it = std::min_element(fit.begin(), fit.end());
        if (r.history.empty() || *it < r.best_fitness) {
            r.best_fitness = *it;
            r.best = pop[static_cast<std::size_t>(it - fit.begin())];
        }
        r.history.push_back(r.best_fitness);
    };
    track();

    for (std::size_t gen = 0; gen < cfg.generations; ++gen) {
        std::vector<std::size_t> order(pop.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fit[a] < fit[b]; });

        std::vector<Point> children;
        const std::size_t needed = cfg.population - cfg.elites;
        while (children.size() < needed) {
            Point a = pop[tournament(fit, cfg.tournament, rng)];
            Point b = pop[tournament(fit, cfg.tournament, rng)];
            if (u(rng) < cfg.crossover_probability) {
                for (std::size_t d = 0; d < dims; ++d) {
                    if (u(rng) < 0.5) sbx(a[d], b[d], box.lower[d], box.upper[d], cfg.crossover_eta, rng);
                }
            }
            for (auto* child : {&a, &b}) {
                for (std::size_t d = 0; d < dims; ++d) {
                    if (u(rng) < pm) polynomial_mutation((*child)[d], box.lower[d], box.upper[d], cfg.mutation_eta, rng);
                }
            }
            children.push_back(std::move(a));
            if (children.size() < needed) children.push_back(std::move(b));
        }
        const std::vector<double> child_fit = checked(f, children);
        r.evaluations += children.size();

        std::vector<Point> next;
        std::vector<double> next_fit;
        for (std::size_t e = 0; e < cfg.elites; ++e) {
            next.push_back(pop[order[e]]);
            next_fit.push_back(fit[order[e]]);
        }
        for (std::size_t c = 0; c < children.size(); ++c) {
            next.push_back(std::move(children[c]));
            next_fit.push_back(child_fit[c]);
        }
        pop = std::move(next);
        fit = std::move(next_fit);
        track();
    }
    return r;
}

// =============================================================================
// Modulation search
// =============================================================================

std::string_view to_string(Algorithm a) {
    return a == Algorithm::PSO ? "PSO" : "GA";
}

Algorithm algorithm_from_string(std::string_view s) {
    const std::string l = lower_case(s);
    if (l == "pso") return Algorithm::PSO;
    if (l == "ga") return Algorithm::GA;
    throw ValidationError(fmt::format("unknown optimizer '{}'", s));
}

namespace {

struct Problem {
    const ConverterParams& cp;
    const SearchSpace& space;
    const ObjectiveSpec& obj;
    const Evaluator& ev;

    [[nodiscard]] ModulationParams candidate(const Point& x) const {
        return space.snap(space.to_modulation(x), ev.grid());
    }

    /// Best power-feasible candidate seen by objective(); first wins ties.
    struct Incumbent {
        ModulationParams mp;
        double fitness = std::numeric_limits<double>::infinity();
        bool found = false;
    };
    std::shared_ptr<Incumbent> incumbent = std::make_shared<Incumbent>();

    [[nodiscard]] BatchObjective objective() const {
        return [this](const std::vector<Point>& xs) {
            std::vector<OperatingPoint> ops;
            ops.reserve(xs.size());
            for (const auto& x : xs) ops.push_back(at_converter(cp, candidate(x)));
            const auto metrics = ev.evaluate(cp, ops);
            std::vector<double> f;
            f.reserve(xs.size());
            for (std::size_t i = 0; i < metrics.size(); ++i) {
                f.push_back(fitness(metrics[i], obj, cp));
                if (power_feasible(metrics[i], obj) && f.back() < incumbent->fitness) {
                    *incumbent = {ops[i].mp, f.back(), true};
                }
            }
            return f;
        };
    }

    [[nodiscard]] Box box() const { return {space.lower(), space.upper()}; }

    [[nodiscard]] std::vector<Point> seeds(const std::vector<ModulationParams>& initial) const {
        std::vector<Point> pts;
        for (const auto& mp : initial) pts.push_back(space.from_modulation(mp));
        return pts;
    }

    [[nodiscard]] OptimizationResult finish(const MinimizeResult& m, std::string algorithm,
                                            std::uint64_t seed) const {
        OptimizationResult r;
        // The penalty lets the search cross infeasible regions; the reported
        // answer is the best feasible candidate whenever one was evaluated.
        r.best = incumbent->found ? incumbent->mp : candidate(m.best);
        r.metrics = ev.evaluate(cp, at_converter(cp, r.best));
        r.best_fitness = fitness(r.metrics, obj, cp);
        r.feasible = power_feasible(r.metrics, obj);
        for (std::size_t i = 0; i < m.history.size(); ++i) r.history.push_back({i, m.history[i]});
        r.evaluator = ev.tag();
        r.algorithm = std::move(algorithm);
        r.seed = seed;
        r.evaluations = m.evaluations;
        return r;
    }
};

void check_problem(const ConverterParams& cp, const SearchSpace& space, const ObjectiveSpec& obj) {
    cp.validate();
    space.validate();
    obj.validate(cp);
}

}  // namespace

OptimizationResult pso_optimize(const ConverterParams& cp, const SearchSpace& space, const ObjectiveSpec& obj,
                                const Evaluator& ev, const PsoConfig& cfg,
                                const std::vector<ModulationParams>& initial) {
    check_problem(cp, space, obj);
    const Problem p{cp, space, obj, ev};
    return p.finish(pso_minimize(p.box(), p.objective(), cfg, p.seeds(initial)), "PSO", cfg.seed);
}

OptimizationResult ga_optimize(const ConverterParams& cp, const SearchSpace& space, const ObjectiveSpec& obj,
                               const Evaluator& ev, const GaConfig& cfg,
                               const std::vector<ModulationParams>& initial) {
    check_problem(cp, space, obj);
    const Problem p{cp, space, obj, ev};
    return p.finish(ga_minimize(p.box(), p.objective(), cfg, p.seeds(initial)), "GA", cfg.seed);
}

OptimizationResult optimize(const ConverterParams& cp, const SearchSpace& space, const ObjectiveSpec& obj,
                            const Evaluator& ev, const OptimizerSettings& settings,
                            const std::vector<ModulationParams>& initial) {
    return settings.algorithm == Algorithm::PSO ? pso_optimize(cp, space, obj, ev, settings.pso, initial)
                                                : ga_optimize(cp, space, obj, ev, settings.ga, initial);
}

namespace {

/// `resolution` values per dimension, or one when the bound is pinned.
std::vector<std::vector<double>> lattice_axes(const SearchSpace& space, std::size_t resolution) {
    std::vector<std::vector<double>> axes;
    const auto lo = space.lower();
    const auto hi = space.upper();
    for (std::size_t d = 0; d < lo.size(); ++d) {
        std::vector<double> axis;
        if (lo[d] == hi[d]) {
            axis.push_back(lo[d]);
        } else {
            for (std::size_t k = 0; k < resolution; ++k) {
                axis.push_back(lo[d] + (hi[d] - lo[d]) * static_cast<double>(k) / static_cast<double>(resolution - 1));
            }
        }
        axes.push_back(std::move(axis));
    }
    return axes;
}

/// Lattice points in lexicographic order (first axis slowest).
std::vector<Point> lattice_points(const std::vector<std::vector<double>>& axes) {
    std::vector<Point> pts{Point{}};
    for (const auto& axis : axes) {
        std::vector<Point> next;
        next.reserve(pts.size() * axis.size());
        for (const auto& p : pts) {
            for (const double v : axis) {
                Point q = p;
                q.push_back(v);
                next.push_back(std::move(q));
            }
        }
        pts = std::move(next);
    }
    return pts;
}

std::vector<LandscapeSample> sample_points(const Problem& p, const std::vector<Point>& pts) {
    std::vector<OperatingPoint> ops;
    ops.reserve(pts.size());
    for (const auto& x : pts) ops.push_back(at_converter(p.cp, p.candidate(x)));
    const auto metrics = p.ev.evaluate(p.cp, ops);
    std::vector<LandscapeSample> out;
    out.reserve(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        out.push_back({ops[i].mp, fitness(metrics[i], p.obj, p.cp), metrics[i]});
    }
    return out;
}

}  // namespace

OptimizationResult grid_search(const ConverterParams& cp, const SearchSpace& space, const ObjectiveSpec& obj,
                               const Evaluator& ev, std::size_t resolution) {
    check_problem(cp, space, obj);
    require(resolution >= 2, "grid search needs at least 2 points per dimension");
    const Problem p{cp, space, obj, ev};
    const auto pts = lattice_points(lattice_axes(space, resolution));
    constexpr std::size_t kChunk = 4096;
    MinimizeResult m;
    m.best_fitness = std::numeric_limits<double>::infinity();
    for (std::size_t start = 0; start < pts.size(); start += kChunk) {
        const std::vector<Point> chunk(pts.begin() + static_cast<std::ptrdiff_t>(start),
                                       pts.begin() + static_cast<std::ptrdiff_t>(std::min(pts.size(), start + kChunk)));
        const auto f = p.objective()(chunk);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            if (f[i] < m.best_fitness) {
                m.best_fitness = f[i];
                m.best = chunk[i];
            }
        }
    }
    m.evaluations = pts.size();
    m.history.push_back(m.best_fitness);
    return p.finish(m, "grid", 0);
}

Landscape sample_landscape(const ConverterParams& cp, const SearchSpace& space, const ObjectiveSpec& obj,
                           const Evaluator& ev, std::size_t resolution) {
    check_problem(cp, space, obj);
    require(resolution >= 2 && resolution <= kMaxLandscapeResolution,
            fmt::format("landscape resolution must be in [2, {}]", kMaxLandscapeResolution));
    const Problem p{cp, space, obj, ev};
    Landscape l;
    l.resolution = resolution;
    l.evaluator = ev.tag();
    const auto axes = lattice_axes(space, resolution);
    l.samples = sample_points(p, lattice_points(axes));
    for (std::size_t i = 1; i < l.samples.size(); ++i) {
        if (l.samples[i].fitness < l.samples[l.best_index].fitness) l.best_index = i;
    }
    if (space.dimensions() == 3) {
        const double d0 = l.samples[l.best_index].mp.d0;
        std::vector<Point> plane;
        for (const double a : axes[1]) {
            for (const double b : axes[2]) plane.push_back({d0, a, b});
        }
        l.slice = sample_points(p, plane);
    }
    return l;
}

OptimizationResult sps_solution(const ConverterParams& cp, const ObjectiveSpec& obj, const Evaluator& ev) {
    const SearchSpace sps = SearchSpace::for_strategy(Strategy::SPS);
    check_problem(cp, sps, obj);
    const double p_max = ev.evaluate(cp, at_converter(cp, ModulationParams::sps(sps.d0_max))).p_avg;
    require(obj.target_power <= p_max * (1.0 + obj.power_tolerance),
            fmt::format("target power {} W exceeds the largest SPS power {:.6g} W", obj.target_power, p_max));
    // SPS has one degree of freedom, so the power target pins d0: take the
    // grid ratio in [0, 0.5] whose power is closest to the target.
    std::vector<OperatingPoint> ops;
    const std::size_t half = ev.grid().half();
    for (std::size_t k = 0; k <= half / 2; ++k) {
        ops.push_back(at_converter(cp, ModulationParams::sps(static_cast<double>(k) / static_cast<double>(half))));
    }
    const auto metrics = ev.evaluate(cp, ops);
    std::size_t best = 0;
    for (std::size_t k = 1; k < ops.size(); ++k) {
        if (std::abs(metrics[k].p_avg - obj.target_power) < std::abs(metrics[best].p_avg - obj.target_power)) best = k;
    }
    OptimizationResult r;
    r.best = ops[best].mp;
    r.metrics = metrics[best];
    r.best_fitness = fitness(r.metrics, obj, cp);
    r.feasible = power_feasible(r.metrics, obj);
    r.history.push_back({0, r.best_fitness});
    r.evaluator = ev.tag();
    r.algorithm = "power_match";
    r.evaluations = ops.size();
    return r;
}

namespace {

StrategyComparison make_comparison(const ConverterParams& cp, const ObjectiveSpec& obj, const Evaluator& ev,
                                   const OptimizationResult& sps, const ModulationParams& tps) {
    StrategyComparison c;
    c.target_power = obj.target_power;
    c.evaluator = ev.tag();
    c.sps = sps.best;
    c.sps_metrics = sps.metrics;
    c.sps_fitness = sps.best_fitness;
    c.sps_feasible = sps.feasible;
    c.tps = tps;
    c.tps_metrics = ev.evaluate(cp, at_converter(cp, tps));
    c.tps_fitness = fitness(c.tps_metrics, obj, cp);
    c.tps_feasible = power_feasible(c.tps_metrics, obj);
    c.i_pp_improvement = (c.sps_metrics.i_pp - c.tps_metrics.i_pp) / c.sps_metrics.i_pp;
    c.i_rms_improvement = (c.sps_metrics.i_rms - c.tps_metrics.i_rms) / c.sps_metrics.i_rms;
    return c;
}

}  // namespace

StrategyComparison compare_strategies(const ConverterParams& cp, const ObjectiveSpec& obj, const Evaluator& ev,
                                      const OptimizerSettings& settings, OptimizationResult* tps_result) {
    const OptimizationResult sps = sps_solution(cp, obj, ev);
    ModulationParams seed = sps.best;
    seed.strategy = Strategy::TPS;
    OptimizationResult tps =
        optimize(cp, SearchSpace::for_strategy(Strategy::TPS), obj, ev, settings, std::vector<ModulationParams>{seed});
    StrategyComparison c = make_comparison(cp, obj, ev, sps, tps.best);
    if (tps_result != nullptr) *tps_result = std::move(tps);
    return c;
}

StrategyComparison compare_strategies(const ConverterParams& cp, const ObjectiveSpec& obj, const Evaluator& ev,
                                      const ModulationParams& tps) {
    return make_comparison(cp, obj, ev, sps_solution(cp, obj, ev), tps);
}

// =============================================================================
// Serialization
// =============================================================================

void to_json(nlohmann::json& j, const SearchSpace& s) {
    j = {{"strategy", s.strategy}, {"d0_min", s.d0_min}, {"d0_max", s.d0_max}, {"d_min", s.d_min}, {"d_max", s.d_max}};
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
    const SearchSpace d;
    j.at("strategy").get_to(s.strategy);
    s.d0_min = j.value("d0_min", d.d0_min);
    s.d0_max = j.value("d0_max", d.d0_max);
    s.d_min = j.value("d_min", d.d_min);
    s.d_max = j.value("d_max", d.d_max);
}

void to_json(nlohmann::json& j, const ObjectiveSpec& o) {
    j = {{"goal", std::string(to_string(o.goal))},
         {"target_power", o.target_power},
         {"power_tolerance", o.power_tolerance},
         {"penalty_weight", o.penalty_weight}};
}

void from_json(const nlohmann::json& j, ObjectiveSpec& o) {
    const ObjectiveSpec d;
    o.goal = goal_from_string(j.at("goal").get<std::string>());
    j.at("target_power").get_to(o.target_power);
    o.power_tolerance = j.value("power_tolerance", d.power_tolerance);
    o.penalty_weight = j.value("penalty_weight", d.penalty_weight);
}

void to_json(nlohmann::json& j, const PsoConfig& c) {
    j = {{"swarm_size", c.swarm_size}, {"iterations", c.iterations}, {"inertia", c.inertia},
         {"cognitive", c.cognitive},   {"social", c.social},         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PsoConfig& c) {
    const PsoConfig d;
    c.swarm_size = j.value("swarm_size", d.swarm_size);
    c.iterations = j.value("iterations", d.iterations);
    c.inertia = j.value("inertia", d.inertia);
    c.cognitive = j.value("cognitive", d.cognitive);
    c.social = j.value("social", d.social);
    c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const GaConfig& c) {
    j = {{"population", c.population},
         {"generations", c.generations},
         {"tournament", c.tournament},
         {"crossover_probability", c.crossover_probability},
         {"crossover_eta", c.crossover_eta},
         {"mutation_eta", c.mutation_eta},
         {"mutation_probability", c.mutation_probability},
         {"elites", c.elites},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GaConfig& c) {
    const GaConfig d;
    c.population = j.value("population", d.population);
    c.generations = j.value("generations", d.generations);
    c.tournament = j.value("tournament", d.tournament);
    c.crossover_probability = j.value("crossover_probability", d.crossover_probability);
    c.crossover_eta = j.value("crossover_eta", d.crossover_eta);
    c.mutation_eta = j.value("mutation_eta", d.mutation_eta);
    c.mutation_probability = j.value("mutation_probability", d.mutation_probability);
    c.elites = j.value("elites", d.elites);
    c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const OptimizerSettings& s) {
    j = {{"algorithm", std::string(to_string(s.algorithm))}, {"pso", s.pso}, {"ga", s.ga}};
}

void from_json(const nlohmann::json& j, OptimizerSettings& s) {
    s.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    if (j.contains("pso")) j.at("pso").get_to(s.pso);
    if (j.contains("ga")) j.at("ga").get_to(s.ga);
}

void to_json(nlohmann::json& j, const LandscapeSample& s) {
    j = {{"modulation", s.mp}, {"fitness", s.fitness}, {"metrics", s.metrics}};
}

void from_json(const nlohmann::json& j, LandscapeSample& s) {
    j.at("modulation").get_to(s.mp);
    j.at("fitness").get_to(s.fitness);
    j.at("metrics").get_to(s.metrics);
}

void to_json(nlohmann::json& j, const OptimizationResult& r) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : r.history) history.push_back({{"iteration", h.iteration}, {"best_fitness", h.best_fitness}});
    j = {{"best", r.best},
         {"best_fitness", r.best_fitness},
         {"metrics", r.metrics},
         {"feasible", r.feasible},
         {"history", history},
         {"landscape", r.landscape},
         {"evaluator", r.evaluator},
         {"algorithm", r.algorithm},
         {"seed", r.seed},
         {"evaluations", r.evaluations}};
}

void from_json(const nlohmann::json& j, OptimizationResult& r) {
    j.at("best").get_to(r.best);
    j.at("best_fitness").get_to(r.best_fitness);
    j.at("metrics").get_to(r.metrics);
    j.at("feasible").get_to(r.feasible);
    r.history.clear();
    for (const auto& h : j.at("history")) {
        r.history.push_back({h.at("iteration").get<std::size_t>(), h.at("best_fitness").get<double>()});
    }
    r.landscape = j.value("landscape", std::vector<LandscapeSample>{});
    j.at("evaluator").get_to(r.evaluator);
    j.at("algorithm").get_to(r.algorithm);
    j.at("seed").get_to(r.seed);
    j.at("evaluations").get_to(r.evaluations);
}

void to_json(nlohmann::json& j, const Landscape& l) {
    j = {{"samples", l.samples},
         {"slice", l.slice},
         {"best_index", l.best_index},
         {"resolution", l.resolution},
         {"evaluator", l.evaluator}};
}

void from_json(const nlohmann::json& j, Landscape& l) {
    j.at("samples").get_to(l.samples);
    l.slice = j.value("slice", std::vector<LandscapeSample>{});
    j.at("best_index").get_to(l.best_index);
    j.at("resolution").get_to(l.resolution);
    j.at("evaluator").get_to(l.evaluator);
}

void to_json(nlohmann::json& j, const StrategyComparison& c) {
    j = {{"target_power", c.target_power},
         {"evaluator", c.evaluator},
         {"tps", c.tps},
         {"sps", c.sps},
         {"tps_metrics", c.tps_metrics},
         {"sps_metrics", c.sps_metrics},
         {"tps_fitness", c.tps_fitness},
         {"sps_fitness", c.sps_fitness},
         {"tps_feasible", c.tps_feasible},
         {"sps_feasible", c.sps_feasible},
         {"i_pp_improvement", c.i_pp_improvement},
         {"i_rms_improvement", c.i_rms_improvement}};
}

void from_json(const nlohmann::json& j, StrategyComparison& c) {
    j.at("target_power").get_to(c.target_power);
    j.at("evaluator").get_to(c.evaluator);
    j.at("tps").get_to(c.tps);
    j.at("sps").get_to(c.sps);
    j.at("tps_metrics").get_to(c.tps_metrics);
    j.at("sps_metrics").get_to(c.sps_metrics);
    j.at("tps_fitness").get_to(c.tps_fitness);
    j.at("sps_fitness").get_to(c.sps_fitness);
    j.at("tps_feasible").get_to(c.tps_feasible);
    j.at("sps_feasible").get_to(c.sps_feasible);
    j.at("i_pp_improvement").get_to(c.i_pp_improvement);
    j.at("i_rms_improvement").get_to(c.i_rms_improvement);
}

void write_landscape_csv(std::ostream& os, const std::vector<LandscapeSample>& samples) {
    os << "d0,d1,d2,fitness,p_avg,i_pp,zvs_complete\n";
    for (const auto& s : samples) {
        os << fmt::format("{},{},{},{},{},{},{}\n", s.mp.d0, s.mp.d1, s.mp.d2, s.fitness, s.metrics.p_avg,
                          s.metrics.i_pp, s.metrics.zvs_complete ? 1 : 0);
    }
}

std::vector<LandscapeSample> read_landscape_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.rfind("d0,d1,d2,fitness,p_avg,i_pp,zvs_complete", 0) != 0) {
        throw ValidationError("landscape CSV must start with the d0,d1,d2,fitness,p_avg,i_pp,zvs_complete header");
    }
    std::vector<LandscapeSample> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                v.push_back(std::stod(cell, &used));
            } catch (const std::exception&) {
                throw ValidationError(fmt::format("landscape CSV line {}: '{}' is not a number", lineno, cell));
            }
        }
        if (v.size() != 7) throw ValidationError(fmt::format("landscape CSV line {}: expected 7 columns", lineno));
        LandscapeSample s;
        s.mp = ModulationParams::tps(v[0], v[1], v[2]);
        s.fitness = v[3];
        s.metrics.p_avg = v[4];
        s.metrics.i_pp = v[5];
        s.metrics.zvs_complete = v[6] != 0.0;
        out.push_back(s);
    }
    return out;
}

}  // namespace dabmod::optimizer
