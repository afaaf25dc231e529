#include "dabmod/physics_io.hpp"

#include "dabmod/errors.hpp"

#include <fmt/core.h>

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

namespace dabmod::physics {

namespace {

double parse_double(std::string_view field, std::size_t line) {
    double value = 0.0;
    const auto* first = field.data();
    const auto* last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) {
        throw ValidationError(fmt::format("waveform CSV line {}: '{}' is not a number", line, field));
    }
    return value;
}

}  // namespace

void write_waveform_csv(std::ostream& os, const Waveform& w) {
    os << "t,v_p,v_s,i_l\n";
    for (std::size_t k = 0; k < w.size(); ++k) {
        os << fmt::format("{},{},{},{}\n", w.grid.time(k), w.v_p[k], w.v_s[k], w.i_l[k]);
    }
}

void write_waveform_csv(const std::filesystem::path& path, const Waveform& w) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_waveform_csv(os, w);
}

Waveform read_waveform_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "t,v_p,v_s,i_l") {
        throw ValidationError("waveform CSV must start with header 't,v_p,v_s,i_l'");
    }
    std::vector<double> t;
    Waveform w;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        double row[4];
        std::size_t col = 0;
        std::size_t start = 0;
        while (col < 4) {
            const std::size_t comma = line.find(',', start);
            const std::string_view field(line.data() + start,
                                         (comma == std::string::npos ? line.size() : comma) - start);
            row[col++] = parse_double(field, lineno);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (col != 4) throw ValidationError(fmt::format("waveform CSV line {}: expected 4 columns", lineno));
        t.push_back(row[0]);
        w.v_p.push_back(row[1]);
        w.v_s.push_back(row[2]);
        w.i_l.push_back(row[3]);
    }
    if (t.size() < 2) throw ValidationError("waveform CSV needs at least two rows");
    w.grid = SamplingGrid::from_dt(t[1] - t[0], t.size());
    return w;
}

Waveform read_waveform_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_waveform_csv(is);
}

// =============================================================================
// JSON
// =============================================================================

void to_json(nlohmann::json& j, const Strategy& s) {
    j = std::string(to_string(s));
}

void from_json(const nlohmann::json& j, Strategy& s) {
    s = strategy_from_string(j.get<std::string>());
}

void to_json(nlohmann::json& j, const ConverterParams& cp) {
    j = {{"v_in", cp.v_in}, {"v_out", cp.v_out}, {"n", cp.n},         {"l_lk", cp.l_lk},
         {"r_l", cp.r_l},   {"f_s", cp.f_s},     {"p_rated", cp.p_rated}};
}

void from_json(const nlohmann::json& j, ConverterParams& cp) {
    j.at("v_in").get_to(cp.v_in);
    j.at("v_out").get_to(cp.v_out);
    j.at("n").get_to(cp.n);
    j.at("l_lk").get_to(cp.l_lk);
    j.at("r_l").get_to(cp.r_l);
    j.at("f_s").get_to(cp.f_s);
    j.at("p_rated").get_to(cp.p_rated);
    cp.validate();
}

void to_json(nlohmann::json& j, const ModulationParams& mp) {
    j = {{"strategy", mp.strategy}, {"d0", mp.d0}, {"d1", mp.d1}, {"d2", mp.d2}};
}

void from_json(const nlohmann::json& j, ModulationParams& mp) {
    j.at("strategy").get_to(mp.strategy);
    j.at("d0").get_to(mp.d0);
    j.at("d1").get_to(mp.d1);
    j.at("d2").get_to(mp.d2);
    mp.validate();
}

void to_json(nlohmann::json& j, const SamplingGrid& g) {
    j = {{"samples_per_period", g.samples_per_period()}, {"dt", g.dt()}};
}

void from_json(const nlohmann::json& j, SamplingGrid& g) {
    g = SamplingGrid::from_dt(j.at("dt").get<double>(), j.at("samples_per_period").get<std::size_t>());
}

void to_json(nlohmann::json& j, const Waveform& w) {
    j = {{"v_p", w.v_p}, {"v_s", w.v_s}, {"i_l", w.i_l}, {"grid", w.grid}};
}

void from_json(const nlohmann::json& j, Waveform& w) {
    j.at("v_p").get_to(w.v_p);
    j.at("v_s").get_to(w.v_s);
    j.at("i_l").get_to(w.i_l);
    j.at("grid").get_to(w.grid);
}

void to_json(nlohmann::json& j, const PerformanceMetrics& m) {
    j = {{"p_avg", m.p_avg},   {"i_pp", m.i_pp},           {"i_rms", m.i_rms},
         {"i_peak", m.i_peak}, {"zvs_flags", m.zvs_flags}, {"zvs_complete", m.zvs_complete}};
}

void from_json(const nlohmann::json& j, PerformanceMetrics& m) {
    j.at("p_avg").get_to(m.p_avg);
    j.at("i_pp").get_to(m.i_pp);
    j.at("i_rms").get_to(m.i_rms);
    j.at("i_peak").get_to(m.i_peak);
    m.zvs_flags.clear();
    for (const auto& f : j.at("zvs_flags")) m.zvs_flags.push_back(f.get<bool>());
    j.at("zvs_complete").get_to(m.zvs_complete);
}

void to_json(nlohmann::json& j, const RingingParams& rp) {
    j = {{"overshoot_fraction", rp.overshoot_fraction},
         {"ring_freq", rp.ring_freq},
         {"damping_tau", rp.damping_tau},
         {"enabled", rp.enabled}};
}

void from_json(const nlohmann::json& j, RingingParams& rp) {
    j.at("overshoot_fraction").get_to(rp.overshoot_fraction);
    j.at("ring_freq").get_to(rp.ring_freq);
    j.at("damping_tau").get_to(rp.damping_tau);
    j.at("enabled").get_to(rp.enabled);
}

}  // namespace dabmod::physics
