#include "dabmod/dialogue.hpp"

#include "dabmod/errors.hpp"
#include "dabmod/physics_io.hpp"

#include <fmt/core.h>
#include <fmt/format.h>
#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <thread>

namespace dabmod::dialogue {

using optimizer::Evaluator;
using optimizer::ObjectiveSpec;
using optimizer::OptimizationResult;
using optimizer::SearchSpace;
using physics::ModulationParams;
using physics::PerformanceMetrics;
using physics::SamplingGrid;
using surrogate::OperatingPoint;

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw ValidationError(message);
}

std::string lower_case(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

/// Lower case with '-', '_' and runs of whitespace folded into one space.
std::string normalize_words(std::string_view s) {
    std::string out;
    out.reserve(s.size() + 2);
    out.push_back(' ');
    for (const char raw : s) {
        const auto c = static_cast<unsigned char>(raw);
        const char mapped = (c == '-' || c == '_' || std::isspace(c) != 0) ? ' ' : static_cast<char>(std::tolower(c));
        if (mapped == ' ' && out.back() == ' ') continue;
        out.push_back(mapped);
    }
    out.push_back(' ');
    return out;
}

bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

/// Position of the first whole-word occurrence of `key` in normalized text.
std::size_t find_word(const std::string& text, std::string_view key, std::size_t from = 0) {
    std::size_t pos = text.find(key, from);
    while (pos != std::string::npos) {
        const bool left = pos == 0 || !is_word_char(text[pos - 1]);
        const std::size_t end = pos + key.size();
        const bool right = end >= text.size() || !is_word_char(text[end]);
        if (left && right) return pos;
        pos = text.find(key, pos + 1);
    }
    return std::string::npos;
}

/// Last whole-word occurrence, or npos.
std::size_t rfind_word(const std::string& text, std::string_view key) {
    std::size_t best = std::string::npos;
    for (std::size_t pos = find_word(text, key); pos != std::string::npos; pos = find_word(text, key, pos + 1)) {
        best = pos;
    }
    return best;
}

template <typename T>
struct Keyword {
    std::string_view phrase;
    T value;
};

/// Value of the earliest keyword found in the text.
template <typename T, std::size_t N>
std::optional<T> earliest_keyword(const std::string& text, const std::array<Keyword<T>, N>& table) {
    std::optional<T> found;
    std::size_t at = std::string::npos;
    for (const auto& k : table) {
        const std::size_t pos = find_word(text, k.phrase);
        if (pos != std::string::npos && (at == std::string::npos || pos < at)) {
            at = pos;
            found = k.value;
        }
    }
    return found;
}

constexpr std::array<Keyword<Strategy>, 8> kStrategyWords{{
    {"triple phase shift", Strategy::TPS},
    {"tps", Strategy::TPS},
    {"dual phase shift", Strategy::DPS},
    {"dps", Strategy::DPS},
    {"extended phase shift", Strategy::EPS},
    {"eps", Strategy::EPS},
    {"single phase shift", Strategy::SPS},
    {"sps", Strategy::SPS},
}};

constexpr std::array<Keyword<Goal>, 12> kObjectiveWords{{
    {"min current stress", Goal::MinCurrentStress},
    {"current stress", Goal::MinCurrentStress},
    {"peak to peak", Goal::MinCurrentStress},
    {"i pp", Goal::MinCurrentStress},
    {"ipp", Goal::MinCurrentStress},
    {"min rms current", Goal::MinRmsCurrent},
    {"rms", Goal::MinRmsCurrent},
    {"conduction loss", Goal::MinRmsCurrent},
    {"max zvs range", Goal::MaxZvsRange},
    {"zvs", Goal::MaxZvsRange},
    {"zero voltage switching", Goal::MaxZvsRange},
    {"soft switching", Goal::MaxZvsRange},
}};

constexpr std::array<Keyword<Algorithm>, 4> kOptimizerWords{{
    {"pso", Algorithm::PSO},
    {"particle swarm", Algorithm::PSO},
    {"ga", Algorithm::GA},
    {"genetic", Algorithm::GA},
}};

constexpr std::array<std::string_view, 5> kInputWords{"input", "primary", "v in", "vin", "source"};
constexpr std::array<std::string_view, 5> kOutputWords{"output", "secondary", "v out", "vout", "battery"};

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out += sep;
        out += parts[i];
    }
    return out;
}

template <typename T>
std::string names(const std::vector<T>& values) {
    std::vector<std::string> parts;
    for (const T v : values) parts.emplace_back(optimizer::to_string(v));
    return join(parts, ", ");
}

std::string strategy_names(const std::vector<Strategy>& values) {
    std::vector<std::string> parts;
    for (const Strategy v : values) parts.emplace_back(physics::to_string(v));
    return join(parts, ", ");
}

template <typename T>
bool contains(const std::vector<T>& values, T v) {
    return std::find(values.begin(), values.end(), v) != values.end();
}

bool listed(const std::vector<Field>& fields, Field f) {
    return std::find(fields.begin(), fields.end(), f) != fields.end();
}

std::int64_t system_clock_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string describe_bounds(const SearchSpace& s) {
    const std::string d0 = fmt::format("d0 ∈ [{:g}, {:g}]", s.d0_min, s.d0_max);
    const std::string d = fmt::format("[{:g}, {:g}]", s.d_min, s.d_max);
    switch (s.strategy) {
        case Strategy::SPS: return fmt::format("SPS bounds: {}, d1 = d2 = 1", d0);
        case Strategy::EPS: return fmt::format("EPS bounds: {}, d1 ∈ {}, d2 = 1", d0, d);
        case Strategy::DPS: return fmt::format("DPS bounds: {}, d1 = d2 ∈ {}", d0, d);
        case Strategy::TPS: return fmt::format("TPS bounds: {}, d1 ∈ {}, d2 ∈ {}", d0, d, d);
    }
    return d0;
}

/// Writes through a temporary file and renames it into place.
void write_file_atomically(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", tmp.string()));
        out << content;
        out.flush();
        if (!out) throw std::runtime_error(fmt::format("failed writing {}", tmp.string()));
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

// =============================================================================
// Grounding and prompt
// =============================================================================

GroundingContext GroundingContext::for_converter(const ConverterParams& cp) {
    cp.validate();
    GroundingContext g;
    g.p_rated = cp.p_rated;
    g.v_in_min = 0.9 * cp.v_in;
    g.v_in_max = 1.1 * cp.v_in;
    g.v_out_min = 0.9 * cp.v_out;
    g.v_out_max = 1.1 * cp.v_out;
    return g;
}

void GroundingContext::validate(const ConverterParams& cp) const {
    require(!strategies.empty(), "grounding needs at least one strategy");
    require(!objectives.empty(), "grounding needs at least one objective");
    require(!optimizers.empty(), "grounding needs at least one optimizer");
    require(p_rated > 0.0 && p_rated <= cp.p_rated,
            fmt::format("grounding power limit {} must lie in (0, {}]", p_rated, cp.p_rated));
    require(v_in_min > 0.0 && v_in_min <= v_in_max,
            fmt::format("input voltage range [{}, {}] must be positive and ordered", v_in_min, v_in_max));
    require(v_out_min > 0.0 && v_out_min <= v_out_max,
            fmt::format("output voltage range [{}, {}] must be positive and ordered", v_out_min, v_out_max));
    require(v_in_min <= cp.v_in && cp.v_in <= v_in_max, "input voltage range must contain the converter's v_in");
    require(v_out_min <= cp.v_out && cp.v_out <= v_out_max, "output voltage range must contain the converter's v_out");
    require(d_min > 0.0 && d_min <= 1.0, fmt::format("d_min = {} must lie in (0, 1]", d_min));
}

std::string GroundingContext::render() const {
    std::string out;
    out += fmt::format("Allowed strategies: {}\n", strategy_names(strategies));
    out += fmt::format("Allowed objectives: {}\n", names(objectives));
    out += fmt::format("Allowed optimizers: {}\n", names(optimizers));
    out += fmt::format("Target power: (0, {:g}] W\n", p_rated);
    out += fmt::format("Input voltage: [{:g}, {:g}] V\n", v_in_min, v_in_max);
    out += fmt::format("Output voltage: [{:g}, {:g}] V\n", v_out_min, v_out_max);
    out += fmt::format("Phase-shift ratios: d0 ∈ [0, 0.5], d1 and d2 ∈ [{:g}, 1]", d_min);
    return out;
}

PromptTemplate PromptTemplate::standard(const GroundingContext& g) {
    PromptTemplate t;
    t.s_message = std::string(kDefaultPersona);
    t.sub_task =
        "Collect the design specification step by step, one group per reply:\n"
        "1. modulation strategy;\n"
        "2. design objective;\n"
        "3. operating conditions (target power, input voltage, output voltage);\n"
        "4. optimization algorithm.\n"
        "Then confirm the specification and report the design outcome with its analysis.";
    t.ground_c = g.render();
    t.output_str =
        "Reply with one JSON object that uses only these keys and omits anything the engineer has not stated:\n"
        "{\"strategy\": \"SPS|EPS|DPS|TPS\", \"objective\": \"min_current_stress|min_rms_current|max_zvs_range\", "
        "\"target_power\": <watts>, \"v_in\": <volts>, \"v_out\": <volts>, \"optimizer\": \"PSO|GA\"}";
    return t;
}

void PromptTemplate::validate() const {
    const std::array<std::pair<std::string_view, const std::string*>, 4> parts{
        {{"s_message", &s_message}, {"sub_task", &sub_task}, {"ground_c", &ground_c}, {"output_str", &output_str}}};
    for (const auto& [name, text] : parts) {
        if (text->empty()) throw ValidationError(fmt::format("prompt part '{}' is empty", name));
    }
}

std::string assemble_pe_prompt(const PromptTemplate& t, std::string_view delimiter) {
    t.validate();
    std::string out = t.s_message;
    for (const std::string* part : {&t.sub_task, &t.ground_c, &t.output_str}) {
        out += delimiter;
        out += *part;
    }
    return out;
}

// =============================================================================
// Specification
// =============================================================================

std::string_view to_string(Field f) {
    switch (f) {
        case Field::Strategy: return "strategy";
        case Field::Objective: return "objective";
        case Field::TargetPower: return "target_power";
        case Field::VIn: return "v_in";
        case Field::VOut: return "v_out";
        case Field::Optimizer: return "optimizer";
    }
    return "strategy";
}

Field field_from_string(std::string_view s) {
    for (const Field f : kAllFields) {
        if (to_string(f) == s) return f;
    }
    throw ValidationError(fmt::format("unknown specification field '{}'", s));
}

bool DesignSpec::has(Field f) const {
    switch (f) {
        case Field::Strategy: return strategy.has_value();
        case Field::Objective: return objective.has_value();
        case Field::TargetPower: return target_power.has_value();
        case Field::VIn: return v_in.has_value();
        case Field::VOut: return v_out.has_value();
        case Field::Optimizer: return optimizer.has_value();
    }
    return false;
}

void DesignSpec::clear(Field f) {
    switch (f) {
        case Field::Strategy: strategy.reset(); break;
        case Field::Objective: objective.reset(); break;
        case Field::TargetPower: target_power.reset(); break;
        case Field::VIn: v_in.reset(); break;
        case Field::VOut: v_out.reset(); break;
        case Field::Optimizer: optimizer.reset(); break;
    }
}

void DesignSpec::merge(const DesignSpec& other, const std::vector<Field>& fields) {
    for (const Field f : fields) {
        if (!other.has(f)) continue;
        switch (f) {
            case Field::Strategy: strategy = other.strategy; break;
            case Field::Objective: objective = other.objective; break;
            case Field::TargetPower: target_power = other.target_power; break;
            case Field::VIn: v_in = other.v_in; break;
            case Field::VOut: v_out = other.v_out; break;
            case Field::Optimizer: optimizer = other.optimizer; break;
        }
    }
}

std::vector<Field> DesignSpec::missing() const {
    std::vector<Field> out;
    for (const Field f : kAllFields) {
        if (!has(f)) out.push_back(f);
    }
    return out;
}

SpecCheck validate_spec(const DesignSpec& spec, const GroundingContext& g) {
    SpecCheck check;
    auto violate = [&](Field f, const std::string& allowed, const std::string& got) {
        check.violations.push_back({f, fmt::format("{} ∉ {} (got {})", to_string(f), allowed, got)});
    };
    if (spec.strategy && !contains(g.strategies, *spec.strategy)) {
        violate(Field::Strategy, fmt::format("{{{}}}", strategy_names(g.strategies)),
                std::string(physics::to_string(*spec.strategy)));
    }
    if (spec.objective && !contains(g.objectives, *spec.objective)) {
        violate(Field::Objective, fmt::format("{{{}}}", names(g.objectives)),
                std::string(optimizer::to_string(*spec.objective)));
    }
    if (spec.target_power) {
        const double p = *spec.target_power;
        if (!(std::isfinite(p) && p > 0.0 && p <= g.p_rated)) {
            violate(Field::TargetPower, fmt::format("(0, {:g}]", g.p_rated), fmt::format("{:g} W", p));
        }
    }
    if (spec.v_in) {
        const double v = *spec.v_in;
        if (!(std::isfinite(v) && v >= g.v_in_min && v <= g.v_in_max)) {
            violate(Field::VIn, fmt::format("[{:g}, {:g}]", g.v_in_min, g.v_in_max), fmt::format("{:g} V", v));
        }
    }
    if (spec.v_out) {
        const double v = *spec.v_out;
        if (!(std::isfinite(v) && v >= g.v_out_min && v <= g.v_out_max)) {
            violate(Field::VOut, fmt::format("[{:g}, {:g}]", g.v_out_min, g.v_out_max), fmt::format("{:g} V", v));
        }
    }
    if (spec.optimizer && !contains(g.optimizers, *spec.optimizer)) {
        violate(Field::Optimizer, fmt::format("{{{}}}", names(g.optimizers)),
                std::string(optimizer::to_string(*spec.optimizer)));
    }
    if (spec.strategy) check.bounds = describe_bounds(SearchSpace::for_strategy(*spec.strategy, g.d_min));
    return check;
}

// =============================================================================
// LLM client
// =============================================================================

void LlmClientConfig::validate() const {
    require(!endpoint.empty(), "LLM endpoint must not be empty");
    require(!model.empty(), "LLM model name must not be empty");
    require(std::isfinite(temperature) && temperature >= 0.0 && temperature <= 2.0,
            fmt::format("LLM temperature {} must lie in [0, 2]", temperature));
    require(timeout_seconds > 0.0, "LLM timeout must be positive");
    require(min_interval_seconds >= 0.0, "LLM request spacing must be >= 0");
}

namespace {

struct Endpoint {
    std::string host;
    int port = 80;
    std::string path = "/";
};

Endpoint parse_endpoint(const std::string& url) {
    static const std::regex re(R"(^http://([^/:]+)(?::([0-9]+))?(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) {
        throw LlmError(fmt::format("unsupported LLM endpoint '{}' (expected http://host[:port]/path)", url));
    }
    Endpoint e;
    e.host = m[1].str();
    if (m[2].matched) e.port = std::stoi(m[2].str());
    if (m[3].matched) e.path = m[3].str();
    return e;
}

}  // namespace

HttpLlmClient::HttpLlmClient(LlmClientConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    (void)parse_endpoint(cfg_.endpoint);
}

std::string HttpLlmClient::complete(const std::vector<ChatMessage>& messages) {
    const Endpoint ep = parse_endpoint(cfg_.endpoint);
    std::lock_guard lock(mutex_);
    if (cfg_.min_interval_seconds > 0.0 && last_ != std::chrono::steady_clock::time_point{}) {
        const auto ready = last_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                       std::chrono::duration<double>(cfg_.min_interval_seconds));
        std::this_thread::sleep_until(ready);
    }
    last_ = std::chrono::steady_clock::now();

    nlohmann::json body{{"model", cfg_.model}, {"temperature", cfg_.temperature}, {"messages", nlohmann::json::array()}};
    for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});

    httplib::Client cli(ep.host, ep.port);
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
        std::chrono::duration<double>(cfg_.timeout_seconds));
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key != nullptr && *key != '\0') {
        headers.emplace("Authorization", fmt::format("Bearer {}", key));
    }
    const auto res = cli.Post(ep.path, headers, body.dump(), "application/json");
    if (!res) throw LlmError(fmt::format("LLM request failed: {}", httplib::to_string(res.error())));
    if (res->status != 200) throw LlmError(fmt::format("LLM endpoint returned HTTP {}", res->status));
    try {
        const auto reply = nlohmann::json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw LlmError(fmt::format("malformed LLM response: {}", e.what()));
    }
}

// =============================================================================
// Extraction
// =============================================================================

std::optional<double> parse_quantity(std::string_view text, char unit) {
    static const std::regex re(R"(^\s*([-+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+))\s*([kKm]?)([A-Za-z]*)\s*$)");
    const std::string s(text);
    std::smatch m;
    if (!std::regex_match(s, m, re)) return std::nullopt;
    const std::string word = lower_case(m[3].str());
    const char u = static_cast<char>(std::tolower(static_cast<unsigned char>(unit)));
    const bool ok = word.empty() || word == std::string(1, u) ||
                    (u == 'w' && (word == "watt" || word == "watts")) || (u == 'v' && (word == "volt" || word == "volts"));
    if (!ok) return std::nullopt;
    if (word.empty() && m[2].length() > 0) return std::nullopt;
    double value = std::stod(m[1].str());
    if (m[2].str() == "k" || m[2].str() == "K") value *= 1e3;
    if (m[2].str() == "m") value *= 1e-3;
    return value;
}

DesignSpec extract_with_rules(std::string_view text, const std::vector<Field>& expected) {
    DesignSpec out;
    const std::string words = normalize_words(text);
    if (listed(expected, Field::Strategy)) out.strategy = earliest_keyword(words, kStrategyWords);
    if (listed(expected, Field::Objective)) out.objective = earliest_keyword(words, kObjectiveWords);
    if (listed(expected, Field::Optimizer)) out.optimizer = earliest_keyword(words, kOptimizerWords);

    // Quantities with units; each is assigned by the words since the previous one.
    static const std::regex re(
        R"(([-+]?(?:[0-9]+(?:\.[0-9]+)?|\.[0-9]+))\s*(k|K|m)?(Watts|watts|Watt|watt|Volts|volts|Volt|volt|W|w|V|v)(?![A-Za-z0-9_]))");
    const std::string s(text);
    DesignSpec found;
    std::size_t context_start = 0;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
        const std::smatch& m = *it;
        const auto pos = static_cast<std::size_t>(m.position(0));
        const std::string context = normalize_words(std::string_view(s).substr(context_start, pos - context_start));
        context_start = pos + static_cast<std::size_t>(m.length(0));
        // A sign glued to a preceding digit is a range dash, not a sign.
        std::string number = m[1].str();
        if ((number.front() == '-' || number.front() == '+') && pos > 0 &&
            std::isdigit(static_cast<unsigned char>(s[pos - 1])) != 0) {
            number.erase(0, 1);
        }
        double value = std::stod(number);
        if (m[2].str() == "k" || m[2].str() == "K") value *= 1e3;
        if (m[2].str() == "m") value *= 1e-3;
        const char unit = static_cast<char>(std::tolower(static_cast<unsigned char>(m[3].str().front())));

        if (unit == 'w') {
            if (!found.target_power) found.target_power = value;
            continue;
        }
        std::size_t in_at = std::string::npos;
        std::size_t out_at = std::string::npos;
        for (const auto w : kInputWords) {
            const std::size_t p = rfind_word(context, w);
            if (p != std::string::npos && (in_at == std::string::npos || p > in_at)) in_at = p;
        }
        for (const auto w : kOutputWords) {
            const std::size_t p = rfind_word(context, w);
            if (p != std::string::npos && (out_at == std::string::npos || p > out_at)) out_at = p;
        }
        Field target;
        if (in_at != std::string::npos && (out_at == std::string::npos || in_at > out_at)) {
            target = Field::VIn;
        } else if (out_at != std::string::npos) {
            target = Field::VOut;
        } else {
            target = found.v_in ? Field::VOut : Field::VIn;
        }
        if (target == Field::VIn && !found.v_in) found.v_in = value;
        if (target == Field::VOut && !found.v_out) found.v_out = value;
    }
    out.merge(found, expected);
    return out;
}

DesignSpec parse_llm_reply(std::string_view reply, const std::vector<Field>& expected) {
    const std::size_t open = reply.find('{');
    const std::size_t close = reply.rfind('}');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
        throw ValidationError("LLM reply holds no JSON object");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(reply.substr(open, close - open + 1));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(fmt::format("LLM reply is not valid JSON: {}", e.what()));
    }
    if (!j.is_object()) throw ValidationError("LLM reply must be a JSON object");

    auto text_of = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    auto number_of = [&](const nlohmann::json& v, char unit, Field f) -> double {
        if (v.is_number()) return v.get<double>();
        if (v.is_string()) {
            if (auto q = parse_quantity(v.get<std::string>(), unit)) return *q;
        }
        throw ValidationError(fmt::format("LLM reply field {} = {} is not a quantity", to_string(f), v.dump()));
    };

    DesignSpec out;
    for (const Field f : expected) {
        const auto it = j.find(std::string(to_string(f)));
        if (it == j.end() || it->is_null()) continue;
        const nlohmann::json& v = *it;
        switch (f) {
            case Field::Strategy: {
                const auto rules = extract_with_rules(text_of(v), {Field::Strategy});
                if (!rules.strategy) throw ValidationError(fmt::format("unknown strategy {}", v.dump()));
                out.strategy = rules.strategy;
                break;
            }
            case Field::Objective: {
                const auto rules = extract_with_rules(text_of(v), {Field::Objective});
                if (!rules.objective) throw ValidationError(fmt::format("unknown objective {}", v.dump()));
                out.objective = rules.objective;
                break;
            }
            case Field::Optimizer: {
                const auto rules = extract_with_rules(text_of(v), {Field::Optimizer});
                if (!rules.optimizer) throw ValidationError(fmt::format("unknown optimizer {}", v.dump()));
                out.optimizer = rules.optimizer;
                break;
            }
            case Field::TargetPower: out.target_power = number_of(v, 'W', f); break;
            case Field::VIn: out.v_in = number_of(v, 'V', f); break;
            case Field::VOut: out.v_out = number_of(v, 'V', f); break;
        }
    }
    return out;
}

Extraction extract_fields(std::string_view user_text, const std::vector<Field>& expected, const GroundingContext& g,
                          LlmClient* llm, const std::vector<ChatMessage>& history) {
    require(!expected.empty(), "extraction needs at least one expected field");
    Extraction ex;
    if (llm != nullptr) {
        std::vector<ChatMessage> messages{{"system", assemble_pe_prompt(PromptTemplate::standard(g))}};
        messages.insert(messages.end(), history.begin(), history.end());
        std::vector<std::string> wanted;
        for (const Field f : expected) wanted.emplace_back(to_string(f));
        messages.push_back({"user", fmt::format("{}\n\n(Extract: {})", user_text, join(wanted, ", "))});
        try {
            ex.fields = parse_llm_reply(llm->complete(messages), expected);
            ex.source = "llm";
            return ex;
        } catch (const std::exception& e) {
            ex.degraded = true;
            ex.degraded_reason = e.what();
        }
    }
    ex.fields = extract_with_rules(user_text, expected);
    ex.source = "rules";
    return ex;
}

// =============================================================================
// Design run
// =============================================================================

void Engines::validate() const {
    require(oracle_samples >= 128 && oracle_samples % 2 == 0,
            fmt::format("oracle grid needs an even sample count >= 128 (got {})", oracle_samples));
    pso.validate();
    ga.validate();
    refine_pso.validate();
    require(landscape_resolution >= 2 && landscape_resolution <= optimizer::kMaxLandscapeResolution,
            fmt::format("landscape resolution must lie in [2, {}]", optimizer::kMaxLandscapeResolution));
    require(refine_half_width > 0.0, "refinement half-width must be positive");
    if (pair) {
        pair->validate();
        require(oracle_samples % pair->grid.samples_per_period() == 0,
                "the oracle grid must contain the surrogate grid so surrogate candidates stay aligned");
    }
}

namespace {

std::size_t zvs_ok(const PerformanceMetrics& m) {
    return static_cast<std::size_t>(std::count(m.zvs_flags.begin(), m.zvs_flags.end(), true));
}

std::string describe_modulation(const ModulationParams& mp) {
    switch (mp.strategy) {
        case Strategy::SPS: return fmt::format("d0 = {:.4f}", mp.d0);
        case Strategy::EPS: return fmt::format("d0 = {:.4f}, d1 = {:.4f}", mp.d0, mp.d1);
        case Strategy::DPS: return fmt::format("d0 = {:.4f}, d1 = d2 = {:.4f}", mp.d0, mp.d1);
        case Strategy::TPS: return fmt::format("d0 = {:.4f}, d1 = {:.4f}, d2 = {:.4f}", mp.d0, mp.d1, mp.d2);
    }
    return {};
}

std::string describe_metrics(const PerformanceMetrics& m) {
    return fmt::format("p_avg = {:.2f} W, i_pp = {:.3f} A, i_rms = {:.3f} A, ZVS on {} of {} edges", m.p_avg, m.i_pp,
                       m.i_rms, zvs_ok(m), m.zvs_flags.size());
}

std::vector<AnalysisSection> analysis_text(const DesignReport& r) {
    std::vector<AnalysisSection> out;
    const auto& spec = r.spec;
    {
        std::string text = fmt::format(
            "{} modulation for {} at {:g} W ({:g} V in, {:g} V out): {}. Oracle steady state: {}.",
            physics::to_string(*spec.strategy), optimizer::to_string(*spec.objective), *spec.target_power, *spec.v_in,
            *spec.v_out, describe_modulation(r.design), describe_metrics(r.metrics));
        if (r.metrics.zvs_complete) text += " Every switching edge achieves ZVS.";
        if (!r.feasible) {
            text += fmt::format(" The delivered power misses the target by more than {:g} %, so the design is "
                                "flagged infeasible.",
                                100.0 * r.objective.power_tolerance);
        }
        out.push_back({"Design outcome", text});
    }
    {
        std::string text = fmt::format("{} (seed {}) on the {} evaluator: {} candidate evaluations, best fitness {:.4f}.",
                                       r.search.algorithm, r.search.seed, r.search.evaluator, r.search.evaluations,
                                       r.search.best_fitness);
        if (r.search.evaluator == "surrogate") {
            text += fmt::format(" Surrogate prediction at the search optimum: p_avg = {:.2f} W, i_pp = {:.3f} A; "
                                "oracle check: p_avg = {:.2f} W, i_pp = {:.3f} A.",
                                r.verification.surrogate.p_avg, r.verification.surrogate.i_pp,
                                r.verification.oracle.p_avg, r.verification.oracle.i_pp);
            if (r.verification.refined) {
                text += " The oracle check missed the power tolerance, so a local oracle search refined the design.";
            }
        }
        out.push_back({"Search", text});
    }
    if (r.comparison) {
        const auto& c = *r.comparison;
        out.push_back({"Strategy comparison",
                       fmt::format("SPS at the same power needs d0 = {:.4f} ({}). Against it the design changes i_pp "
                                   "by {:+.1f} % and i_rms by {:+.1f} %.",
                                   c.sps.d0, describe_metrics(c.sps_metrics), -100.0 * c.i_pp_improvement,
                                   -100.0 * c.i_rms_improvement)});
    } else {
        out.push_back({"Strategy comparison", fmt::format("No SPS comparison: {}", r.comparison_note)});
    }
    {
        const auto& l = r.landscape;
        const auto& best = l.samples.at(l.best_index);
        std::string text = fmt::format("{} lattice samples at resolution {} with the {} evaluator; best lattice point {} "
                                       "with fitness {:.4f}.",
                                       l.samples.size(), l.resolution, l.evaluator, describe_modulation(best.mp),
                                       best.fitness);
        if (!l.slice.empty()) {
            text += fmt::format(" The (d1, d2) slice through d0 = {:.4f} holds {} samples.", best.mp.d0,
                                l.slice.size());
        }
        out.push_back({"Optimization landscape", text});
    }
    return out;
}

}  // namespace

DesignReport run_design(const DesignSpec& spec, const ConverterParams& cp, const Engines& engines,
                        const GroundingContext& g) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!spec.complete()) {
        std::vector<std::string> missing;
        for (const Field f : spec.missing()) missing.emplace_back(to_string(f));
        throw ValidationError(fmt::format("specification incomplete: missing {}", join(missing, ", ")));
    }
    const SpecCheck check = validate_spec(spec, g);
    if (!check.ok()) {
        std::vector<std::string> messages;
        for (const auto& v : check.violations) messages.push_back(v.message);
        throw ValidationError(fmt::format("specification violates the grounding: {}", join(messages, "; ")));
    }
    engines.validate();

    DesignReport r;
    r.spec = spec;
    r.converter = cp.at_voltages(*spec.v_in, *spec.v_out);
    r.space = SearchSpace::for_strategy(*spec.strategy, g.d_min);
    r.objective.goal = *spec.objective;
    r.objective.target_power = *spec.target_power;
    const ConverterParams& conv = r.converter;

    const SamplingGrid oracle_grid(cp.f_s, engines.oracle_samples);
    const Evaluator oracle = Evaluator::oracle(oracle_grid);
    const Evaluator search_ev = engines.pair ? Evaluator::surrogate(engines.pair) : oracle;
    const optimizer::OptimizerSettings settings{*spec.optimizer, engines.pso, engines.ga};

    auto t = std::chrono::steady_clock::now();
    r.search = optimizer::optimize(conv, r.space, r.objective, search_ev, settings);
    r.timing.search_seconds = seconds_since(t);

    t = std::chrono::steady_clock::now();
    r.design = r.search.best;
    if (engines.pair) {
        const OperatingPoint op{r.search.best, conv.v_in, conv.v_out};
        r.verification.surrogate = r.search.metrics;
        r.verification.oracle = oracle.evaluate(conv, op);
        r.verification.search_feasible = optimizer::power_feasible(r.verification.oracle, r.objective);
        r.metrics = r.verification.oracle;
        if (!r.verification.search_feasible && engines.refine_with_oracle) {
            SearchSpace local = r.space;
            const double hw = engines.refine_half_width;
            local.d0_min = std::max(r.space.d0_min, r.design.d0 - hw);
            local.d0_max = std::min(r.space.d0_max, r.design.d0 + hw);
            local.d_min = std::max(r.space.d_min, std::min(r.design.d1, r.design.d2) - hw);
            local.d_max = std::min(r.space.d_max, std::max(r.design.d1, r.design.d2) + hw);
            if (r.space.strategy == Strategy::SPS) local.d_min = r.space.d_min;
            const OptimizationResult refined =
                optimizer::pso_optimize(conv, local, r.objective, oracle, engines.refine_pso, {r.design});
            if (refined.best_fitness < optimizer::fitness(r.metrics, r.objective, conv) || refined.feasible) {
                r.design = refined.best;
                r.metrics = refined.metrics;
                r.verification.refined = true;
            }
        }
    } else {
        r.metrics = r.search.metrics;
    }
    r.fitness = optimizer::fitness(r.metrics, r.objective, conv);
    r.feasible = optimizer::power_feasible(r.metrics, r.objective);
    r.waveform = physics::solve_steady_state(conv, r.design, oracle_grid);
    r.timing.verification_seconds = seconds_since(t);

    t = std::chrono::steady_clock::now();
    r.landscape = optimizer::sample_landscape(conv, r.space, r.objective, search_ev, engines.landscape_resolution);
    r.timing.landscape_seconds = seconds_since(t);

    t = std::chrono::steady_clock::now();
    try {
        r.comparison = optimizer::compare_strategies(conv, r.objective, oracle, r.design);
    } catch (const ValidationError& e) {
        r.comparison_note = e.what();
    }
    r.timing.comparison_seconds = seconds_since(t);

    r.analysis = analysis_text(r);
    r.timing.total_seconds = seconds_since(t0);
    return r;
}

nlohmann::json report_artifact(const DesignReport& r) {
    nlohmann::json j = r;
    j.erase("timing");
    return j;
}

std::vector<std::string> write_report_artifacts(const std::filesystem::path& dir, const DesignReport& r) {
    std::filesystem::create_directories(dir);
    std::ostringstream landscape_csv;
    optimizer::write_landscape_csv(landscape_csv, r.landscape.samples);
    std::ostringstream waveform_csv;
    physics::write_waveform_csv(waveform_csv, r.waveform);
    const nlohmann::json timing{{"total_seconds", r.timing.total_seconds},
                                {"search_seconds", r.timing.search_seconds},
                                {"verification_seconds", r.timing.verification_seconds},
                                {"landscape_seconds", r.timing.landscape_seconds},
                                {"comparison_seconds", r.timing.comparison_seconds}};
    const std::vector<std::pair<std::string, std::string>> files{
        {"report.json", report_artifact(r).dump(2) + "\n"},
        {"landscape.csv", landscape_csv.str()},
        {"landscape.json", nlohmann::json(r.landscape).dump() + "\n"},
        {"waveform.csv", waveform_csv.str()},
        {"timing.json", timing.dump(2) + "\n"},
    };
    std::vector<std::string> written;
    for (const auto& [name, content] : files) {
        write_file_atomically(dir / name, content);
        written.push_back(name);
    }
    return written;
}

// =============================================================================
// State machine
// =============================================================================

std::string_view to_string(Phase p) {
    switch (p) {
        case Phase::CollectStrategy: return "CollectStrategy";
        case Phase::CollectObjective: return "CollectObjective";
        case Phase::CollectConditions: return "CollectConditions";
        case Phase::CollectOptimizer: return "CollectOptimizer";
        case Phase::Running: return "Running";
        case Phase::Presenting: return "Presenting";
        case Phase::Done: return "Done";
    }
    return "CollectStrategy";
}

Phase phase_from_string(std::string_view s) {
    for (const Phase p : {Phase::CollectStrategy, Phase::CollectObjective, Phase::CollectConditions,
                          Phase::CollectOptimizer, Phase::Running, Phase::Presenting, Phase::Done}) {
        if (to_string(p) == s) return p;
    }
    throw ValidationError(fmt::format("unknown dialogue phase '{}'", s));
}

std::vector<Field> expected_fields(Phase p) {
    switch (p) {
        case Phase::CollectStrategy: return {Field::Strategy};
        case Phase::CollectObjective: return {Field::Objective};
        case Phase::CollectConditions: return {Field::TargetPower, Field::VIn, Field::VOut};
        case Phase::CollectOptimizer: return {Field::Optimizer};
        default: return {};
    }
}

std::string_view to_string(Role r) {
    return r == Role::User ? "user" : "assistant";
}

Dependencies Dependencies::for_converter(const ConverterParams& cp) {
    Dependencies d;
    d.cp = cp;
    d.grounding = GroundingContext::for_converter(cp);
    return d;
}

namespace {

std::string strategy_blurb(Strategy s) {
    switch (s) {
        case Strategy::SPS: return "SPS (single phase shift): one control variable d0, simplest, high current stress at light load";
        case Strategy::EPS: return "EPS (extended phase shift): adds a primary inner shift d1";
        case Strategy::DPS: return "DPS (dual phase shift): equal inner shifts d1 = d2 on both bridges";
        case Strategy::TPS: return "TPS (triple phase shift): independent d0, d1 and d2, the most freedom";
    }
    return {};
}

std::string objective_blurb(Goal g) {
    switch (g) {
        case Goal::MinCurrentStress: return "min_current_stress lowers the peak-to-peak inductor current i_pp";
        case Goal::MinRmsCurrent: return "min_rms_current lowers the RMS current, a proxy for conduction loss";
        case Goal::MaxZvsRange: return "max_zvs_range maximizes the share of switching edges with ZVS";
    }
    return {};
}

std::string phase_question(Phase p, const GroundingContext& g, const Engines& e) {
    switch (p) {
        case Phase::CollectStrategy: {
            std::string text = "Which modulation strategy should I design? Options:\n";
            for (const Strategy s : g.strategies) text += fmt::format("- {}\n", strategy_blurb(s));
            if (contains(g.strategies, Strategy::TPS)) {
                text += "I recommend TPS: its extra degrees of freedom allow the lowest current stress and the widest "
                        "ZVS range.";
            }
            return text;
        }
        case Phase::CollectObjective: {
            std::string text = "Which design objective matters most for your application?\n";
            for (const Goal o : g.objectives) text += fmt::format("- {}\n", objective_blurb(o));
            text += "Current stress is the usual choice when device ratings or magnetics size dominate.";
            return text;
        }
        case Phase::CollectConditions:
            return fmt::format("Please give the operating conditions: target power in (0, {:g}] W, input voltage in "
                               "[{:g}, {:g}] V and output voltage in [{:g}, {:g}] V.",
                               g.p_rated, g.v_in_min, g.v_in_max, g.v_out_min, g.v_out_max);
        case Phase::CollectOptimizer: {
            std::string text = "Which optimization algorithm should I use?\n";
            for (const Algorithm a : g.optimizers) {
                if (a == Algorithm::PSO) {
                    text += fmt::format("- PSO: particle swarm, {} particles for {} iterations (default)\n",
                                        e.pso.swarm_size, e.pso.iterations);
                } else {
                    text += fmt::format("- GA: genetic algorithm, {} individuals for {} generations\n",
                                        e.ga.population, e.ga.generations);
                }
            }
            text += fmt::format("The search runs on the {} evaluator.", e.pair ? "surrogate" : "oracle");
            return text;
        }
        case Phase::Presenting: return "Ask me to display the design outcomes and analysis.";
        default: return {};
    }
}

std::string field_value(const DesignSpec& s, Field f) {
    switch (f) {
        case Field::Strategy: return std::string(physics::to_string(*s.strategy));
        case Field::Objective: return std::string(optimizer::to_string(*s.objective));
        case Field::TargetPower: return fmt::format("{:g} W", *s.target_power);
        case Field::VIn: return fmt::format("{:g} V", *s.v_in);
        case Field::VOut: return fmt::format("{:g} V", *s.v_out);
        case Field::Optimizer: return std::string(optimizer::to_string(*s.optimizer));
    }
    return {};
}

std::string progress_text(const DesignReport& r) {
    std::string text = fmt::format("Running {} on the {} evaluator.\n", r.search.algorithm, r.search.evaluator);
    const auto& h = r.search.history;
    if (!h.empty()) {
        const std::size_t stride = std::max<std::size_t>(1, (h.size() - 1) / 5);
        for (std::size_t k = 0; k < h.size(); k += stride) {
            text += fmt::format("  iteration {:>4}: best fitness {:.4f}\n", h[k].iteration, h[k].best_fitness);
        }
        if ((h.size() - 1) % stride != 0) {
            text += fmt::format("  iteration {:>4}: best fitness {:.4f}\n", h.back().iteration, h.back().best_fitness);
        }
    }
    text += fmt::format("Design finished: {} with fitness {:.4f} ({}).\n", describe_modulation(r.design), r.fitness,
                        r.feasible ? "meets the power target" : "misses the power target");
    text += "Ask me to display the design outcomes and analysis.";
    return text;
}

std::string outcome_text(const DesignReport& r) {
    std::string text = "Design outcomes and analysis.\n";
    for (const auto& s : r.analysis) text += fmt::format("\n{}:\n{}\n", s.title, s.text);
    text += "\nArtifacts: report.json, landscape.csv, waveform.csv.";
    return text;
}

nlohmann::json extraction_json(const Extraction& ex, const std::vector<Field>& expected) {
    nlohmann::json fields = nlohmann::json::object();
    nlohmann::json spec = ex.fields;
    for (const Field f : expected) {
        const std::string key(to_string(f));
        fields[key] = spec.at(key);
    }
    nlohmann::json j{{"fields", fields}, {"source", ex.source}};
    if (ex.degraded) j["degraded"] = ex.degraded_reason;
    return j;
}

}  // namespace

std::string welcome_text(const GroundingContext& g) {
    return fmt::format("Hello, I can design DAB modulation parameters for you. Tell me what you need, or start by "
                       "naming a modulation strategy ({}).",
                       strategy_names(g.strategies));
}

AdvanceResult advance(const DialogueState& state, std::string_view user_text, const Dependencies& deps) {
    if (state.phase == Phase::Done) throw DialogueFinishedError("the dialogue is finished; start a new session");
    const auto now = [&] { return deps.clock ? deps.clock() : system_clock_ms(); };

    AdvanceResult out{state, {}};
    DialogueState& s = out.state;
    s.last_error.clear();
    ChatTurn user{Role::User, std::string(user_text), now(), s.phase, nullptr};
    std::string reply;

    auto run = [&](const std::string& preface) {
        s.phase = Phase::Running;
        try {
            DesignReport report = run_design(s.spec, deps.cp, deps.engines, deps.grounding);
            reply = preface + progress_text(report);
            s.report = std::move(report);
            s.phase = Phase::Presenting;
        } catch (const std::exception& e) {
            s.phase = Phase::CollectOptimizer;
            s.last_error = e.what();
            reply = fmt::format("The design run failed: {}\n{}", e.what(),
                                phase_question(Phase::CollectOptimizer, deps.grounding, deps.engines));
        }
    };

    switch (s.phase) {
        case Phase::CollectStrategy:
        case Phase::CollectObjective:
        case Phase::CollectConditions:
        case Phase::CollectOptimizer: {
            const std::vector<Field> expected = expected_fields(s.phase);
            std::vector<ChatMessage> history;
            for (const auto& t : s.transcript) history.push_back({std::string(to_string(t.role)), t.text});
            const Extraction ex = extract_fields(user_text, expected, deps.grounding, deps.llm, history);
            user.extraction = extraction_json(ex, expected);
            if (ex.degraded) s.degraded = true;

            DesignSpec candidate = s.spec;
            candidate.merge(ex.fields, expected);
            const SpecCheck check = validate_spec(candidate, deps.grounding);
            std::vector<std::string> problems;
            for (const auto& v : check.violations) {
                if (!listed(expected, v.field)) continue;
                problems.push_back(v.message);
                candidate.clear(v.field);
            }
            // Only fields that passed the grounding are kept.
            s.spec = candidate;
            if (!problems.empty()) {
                reply = fmt::format("That is outside the allowed ranges: {}.\n{}", join(problems, "; "),
                                    phase_question(s.phase, deps.grounding, deps.engines));
                break;
            }
            std::vector<std::string> got;
            std::vector<std::string> still;
            for (const Field f : expected) {
                if (ex.fields.has(f)) got.push_back(fmt::format("{} = {}", to_string(f), field_value(s.spec, f)));
                if (!s.spec.has(f)) still.emplace_back(to_string(f));
            }
            if (!still.empty()) {
                std::string text;
                if (!got.empty()) text = fmt::format("Noted {}. ", join(got, ", "));
                text += fmt::format("I still need {}.\n", join(still, ", "));
                reply = text + phase_question(s.phase, deps.grounding, deps.engines);
                break;
            }
            std::string ack = fmt::format("Noted {}.", join(got, ", "));
            if (s.phase == Phase::CollectStrategy && !check.bounds.empty()) ack += fmt::format(" {}.", check.bounds);
            ack += "\n";
            if (s.phase == Phase::CollectOptimizer) {
                run(ack);
            } else {
                s.phase = static_cast<Phase>(static_cast<int>(s.phase) + 1);
                reply = ack + phase_question(s.phase, deps.grounding, deps.engines);
            }
            break;
        }
        case Phase::Running:
            run("Resuming the design run.\n");
            break;
        case Phase::Presenting:
            reply = s.report ? outcome_text(*s.report) : "No design report is available.";
            s.phase = Phase::Done;
            break;
        case Phase::Done:
            break;
    }

    s.transcript.push_back(std::move(user));
    s.transcript.push_back({Role::Assistant, reply, now(), s.phase, nullptr});
    out.reply = std::move(reply);
    return out;
}

// =============================================================================
// Serialization
// =============================================================================

namespace {

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <typename T, typename F>
std::optional<T> optional_from(const nlohmann::json& j, const char* key, F convert) {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return convert(*it);
}

nlohmann::json metrics_or_null(const PerformanceMetrics& m, bool present) {
    return present ? nlohmann::json(m) : nlohmann::json(nullptr);
}

}  // namespace

void to_json(nlohmann::json& j, const GroundingContext& g) {
    std::vector<std::string> strategies;
    for (const Strategy s : g.strategies) strategies.emplace_back(physics::to_string(s));
    std::vector<std::string> objectives;
    for (const Goal o : g.objectives) objectives.emplace_back(optimizer::to_string(o));
    std::vector<std::string> optimizers;
    for (const Algorithm a : g.optimizers) optimizers.emplace_back(optimizer::to_string(a));
    j = {{"strategies", strategies}, {"objectives", objectives}, {"optimizers", optimizers},
         {"p_rated", g.p_rated},     {"v_in_min", g.v_in_min},   {"v_in_max", g.v_in_max},
         {"v_out_min", g.v_out_min}, {"v_out_max", g.v_out_max}, {"d_min", g.d_min}};
}

void from_json(const nlohmann::json& j, GroundingContext& g) {
    g.strategies.clear();
    for (const auto& s : j.at("strategies")) g.strategies.push_back(physics::strategy_from_string(s.get<std::string>()));
    g.objectives.clear();
    for (const auto& o : j.at("objectives")) g.objectives.push_back(optimizer::goal_from_string(o.get<std::string>()));
    g.optimizers.clear();
    for (const auto& a : j.at("optimizers")) {
        g.optimizers.push_back(optimizer::algorithm_from_string(a.get<std::string>()));
    }
    j.at("p_rated").get_to(g.p_rated);
    j.at("v_in_min").get_to(g.v_in_min);
    j.at("v_in_max").get_to(g.v_in_max);
    j.at("v_out_min").get_to(g.v_out_min);
    j.at("v_out_max").get_to(g.v_out_max);
    g.d_min = j.value("d_min", 0.1);
}

void to_json(nlohmann::json& j, const DesignSpec& s) {
    j = {{"strategy", s.strategy ? nlohmann::json(physics::to_string(*s.strategy)) : nlohmann::json(nullptr)},
         {"objective", s.objective ? nlohmann::json(optimizer::to_string(*s.objective)) : nlohmann::json(nullptr)},
         {"target_power", optional_json(s.target_power)},
         {"v_in", optional_json(s.v_in)},
         {"v_out", optional_json(s.v_out)},
         {"optimizer", s.optimizer ? nlohmann::json(optimizer::to_string(*s.optimizer)) : nlohmann::json(nullptr)}};
    nlohmann::json complete = nlohmann::json::object();
    for (const Field f : kAllFields) complete[std::string(to_string(f))] = s.has(f);
    j["complete"] = complete;
}

void from_json(const nlohmann::json& j, DesignSpec& s) {
    auto as_double = [](const nlohmann::json& v) { return v.get<double>(); };
    s.strategy = optional_from<Strategy>(
        j, "strategy", [](const nlohmann::json& v) { return physics::strategy_from_string(v.get<std::string>()); });
    s.objective = optional_from<Goal>(
        j, "objective", [](const nlohmann::json& v) { return optimizer::goal_from_string(v.get<std::string>()); });
    s.target_power = optional_from<double>(j, "target_power", as_double);
    s.v_in = optional_from<double>(j, "v_in", as_double);
    s.v_out = optional_from<double>(j, "v_out", as_double);
    s.optimizer = optional_from<Algorithm>(
        j, "optimizer", [](const nlohmann::json& v) { return optimizer::algorithm_from_string(v.get<std::string>()); });
}

void to_json(nlohmann::json& j, const LlmClientConfig& c) {
    j = {{"endpoint", c.endpoint},
         {"model", c.model},
         {"temperature", c.temperature},
         {"timeout_seconds", c.timeout_seconds},
         {"api_key_env", c.api_key_env},
         {"enabled", c.enabled},
         {"min_interval_seconds", c.min_interval_seconds}};
}

void from_json(const nlohmann::json& j, LlmClientConfig& c) {
    const LlmClientConfig d;
    c.endpoint = j.value("endpoint", d.endpoint);
    c.model = j.value("model", d.model);
    c.temperature = j.value("temperature", d.temperature);
    c.timeout_seconds = j.value("timeout_seconds", d.timeout_seconds);
    c.api_key_env = j.value("api_key_env", d.api_key_env);
    c.enabled = j.value("enabled", d.enabled);
    c.min_interval_seconds = j.value("min_interval_seconds", d.min_interval_seconds);
}

void to_json(nlohmann::json& j, const Engines& e) {
    j = {{"oracle_samples", e.oracle_samples},
         {"pso", e.pso},
         {"ga", e.ga},
         {"landscape_resolution", e.landscape_resolution},
         {"refine_with_oracle", e.refine_with_oracle},
         {"refine_pso", e.refine_pso},
         {"refine_half_width", e.refine_half_width}};
}

void from_json(const nlohmann::json& j, Engines& e) {
    const Engines d;
    e.oracle_samples = j.value("oracle_samples", d.oracle_samples);
    e.pso = j.value("pso", d.pso);
    e.ga = j.value("ga", d.ga);
    e.landscape_resolution = j.value("landscape_resolution", d.landscape_resolution);
    e.refine_with_oracle = j.value("refine_with_oracle", d.refine_with_oracle);
    e.refine_pso = j.value("refine_pso", d.refine_pso);
    e.refine_half_width = j.value("refine_half_width", d.refine_half_width);
}

void to_json(nlohmann::json& j, const DesignReport& r) {
    const bool surrogate = r.search.evaluator == "surrogate";
    nlohmann::json analysis = nlohmann::json::array();
    for (const auto& s : r.analysis) analysis.push_back({{"title", s.title}, {"text", s.text}});
    j = {{"spec", r.spec},
         {"converter", r.converter},
         {"space", r.space},
         {"objective", r.objective},
         {"search", r.search},
         {"verification",
          {{"surrogate", metrics_or_null(r.verification.surrogate, surrogate)},
           {"oracle", metrics_or_null(r.verification.oracle, surrogate)},
           {"search_feasible", r.verification.search_feasible},
           {"refined", r.verification.refined}}},
         {"design", r.design},
         {"metrics", r.metrics},
         {"fitness", r.fitness},
         {"feasible", r.feasible},
         {"comparison", r.comparison ? nlohmann::json(*r.comparison) : nlohmann::json(nullptr)},
         {"comparison_note", r.comparison_note},
         {"landscape", r.landscape},
         {"waveform", r.waveform},
         {"analysis", analysis},
         {"timing",
          {{"total_seconds", r.timing.total_seconds},
           {"search_seconds", r.timing.search_seconds},
           {"verification_seconds", r.timing.verification_seconds},
           {"landscape_seconds", r.timing.landscape_seconds},
           {"comparison_seconds", r.timing.comparison_seconds}}}};
}

void from_json(const nlohmann::json& j, DesignReport& r) {
    j.at("spec").get_to(r.spec);
    j.at("converter").get_to(r.converter);
    j.at("space").get_to(r.space);
    j.at("objective").get_to(r.objective);
    j.at("search").get_to(r.search);
    const auto& v = j.at("verification");
    r.verification = Verification{};
    if (!v.at("surrogate").is_null()) v.at("surrogate").get_to(r.verification.surrogate);
    if (!v.at("oracle").is_null()) v.at("oracle").get_to(r.verification.oracle);
    v.at("search_feasible").get_to(r.verification.search_feasible);
    v.at("refined").get_to(r.verification.refined);
    j.at("design").get_to(r.design);
    j.at("metrics").get_to(r.metrics);
    j.at("fitness").get_to(r.fitness);
    j.at("feasible").get_to(r.feasible);
    r.comparison.reset();
    if (!j.at("comparison").is_null()) r.comparison = j.at("comparison").get<optimizer::StrategyComparison>();
    j.at("comparison_note").get_to(r.comparison_note);
    j.at("landscape").get_to(r.landscape);
    j.at("waveform").get_to(r.waveform);
    r.analysis.clear();
    for (const auto& s : j.at("analysis")) {
        r.analysis.push_back({s.at("title").get<std::string>(), s.at("text").get<std::string>()});
    }
    r.timing = DesignTiming{};
    if (const auto it = j.find("timing"); it != j.end()) {
        r.timing.total_seconds = it->value("total_seconds", 0.0);
        r.timing.search_seconds = it->value("search_seconds", 0.0);
        r.timing.verification_seconds = it->value("verification_seconds", 0.0);
        r.timing.landscape_seconds = it->value("landscape_seconds", 0.0);
        r.timing.comparison_seconds = it->value("comparison_seconds", 0.0);
    }
}

void to_json(nlohmann::json& j, const ChatTurn& t) {
    j = {{"role", to_string(t.role)},
         {"text", t.text},
         {"timestamp_ms", t.timestamp_ms},
         {"phase", to_string(t.phase)},
         {"extraction", t.extraction}};
}

void from_json(const nlohmann::json& j, ChatTurn& t) {
    const std::string role = j.at("role").get<std::string>();
    require(role == "user" || role == "assistant", fmt::format("unknown chat role '{}'", role));
    t.role = role == "user" ? Role::User : Role::Assistant;
    j.at("text").get_to(t.text);
    j.at("timestamp_ms").get_to(t.timestamp_ms);
    t.phase = phase_from_string(j.at("phase").get<std::string>());
    t.extraction = j.value("extraction", nlohmann::json(nullptr));
}

void to_json(nlohmann::json& j, const DialogueState& s) {
    j = {{"phase", to_string(s.phase)},
         {"spec", s.spec},
         {"transcript", s.transcript},
         {"report", s.report ? nlohmann::json(*s.report) : nlohmann::json(nullptr)},
         {"degraded", s.degraded},
         {"last_error", s.last_error}};
}

void from_json(const nlohmann::json& j, DialogueState& s) {
    s.phase = phase_from_string(j.at("phase").get<std::string>());
    j.at("spec").get_to(s.spec);
    j.at("transcript").get_to(s.transcript);
    s.report.reset();
    if (!j.at("report").is_null()) s.report = j.at("report").get<DesignReport>();
    j.at("degraded").get_to(s.degraded);
    s.last_error = j.value("last_error", std::string{});
}

}  // namespace dabmod::dialogue
