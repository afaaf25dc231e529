#pragma once

// =============================================================================
// Design dialogue
// =============================================================================
// A state machine collects a DesignSpec one phase at a time:
//
//   CollectStrategy -> CollectObjective -> CollectConditions
//     -> CollectOptimizer -> Running -> Presenting -> Done
//
// Each user turn is parsed by a deterministic keyword/unit extractor, or by
// an LLM when one is configured (falling back to the rules on any failure).
// Extracted fields are checked against the GroundingContext before they are
// accepted. Entering Running runs the optimization and stores a
// DesignReport; replies are fixed templates filled from the grounding and
// the report.
// =============================================================================

#include "dabmod/dab_physics.hpp"
#include "dabmod/optimizer.hpp"
#include "dabmod/surrogate.hpp"

#include <json.hpp>

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dabmod::dialogue {

using optimizer::Algorithm;
using optimizer::Goal;
using physics::ConverterParams;
using physics::Strategy;

// =============================================================================
// Grounding and prompt
// =============================================================================

/// Ranges a specification must respect.
struct GroundingContext {
    std::vector<Strategy> strategies{Strategy::SPS, Strategy::EPS, Strategy::DPS, Strategy::TPS};
    std::vector<Goal> objectives{Goal::MinCurrentStress, Goal::MinRmsCurrent, Goal::MaxZvsRange};
    std::vector<Algorithm> optimizers{Algorithm::PSO, Algorithm::GA};
    double p_rated = 200.0;  ///< target power must lie in (0, p_rated] [W]
    double v_in_min = 180.0;
    double v_in_max = 220.0;
    double v_out_min = 144.0;
    double v_out_max = 176.0;
    double d_min = 0.1;  ///< lower bound on the inner ratios d1, d2

    /// Power up to p_rated, link voltages within +/-10 % of the converter's.
    [[nodiscard]] static GroundingContext for_converter(const ConverterParams& cp);

    /// Nonempty lists and ordered ranges consistent with the converter.
    void validate(const ConverterParams& cp) const;
    /// Plain-text rendering used in the prompt; every name appears once.
    [[nodiscard]] std::string render() const;
};

inline constexpr std::string_view kDefaultPersona =
    "assistant to electrical engineer responsible for documenting modulation design specifications "
    "for dual active bridge converters. Ask for one group of specifications at a time, recommend "
    "options when the engineer is unsure, and never accept values outside the stated ranges.";

struct PromptTemplate {
    std::string s_message;   ///< persona
    std::string sub_task;    ///< stepwise collection instructions
    std::string ground_c;    ///< rendered GroundingContext
    std::string output_str;  ///< reply schema

    [[nodiscard]] static PromptTemplate standard(const GroundingContext& g);
    /// Throws ValidationError naming the first empty part.
    void validate() const;
};

inline constexpr std::string_view kPromptDelimiter = "\n---\n";

/// Parts in order (persona, sub-task, grounding, output schema) joined by
/// the delimiter.
[[nodiscard]] std::string assemble_pe_prompt(const PromptTemplate& t,
                                             std::string_view delimiter = kPromptDelimiter);

// =============================================================================
// Specification
// =============================================================================

enum class Field { Strategy, Objective, TargetPower, VIn, VOut, Optimizer };

[[nodiscard]] std::string_view to_string(Field f);
[[nodiscard]] Field field_from_string(std::string_view s);

/// Every field, in collection order.
inline constexpr std::array<Field, 6> kAllFields{Field::Strategy,   Field::Objective, Field::TargetPower,
                                                 Field::VIn,        Field::VOut,      Field::Optimizer};

/// A specification under construction; unset fields are still missing.
struct DesignSpec {
    std::optional<Strategy> strategy;
    std::optional<Goal> objective;
    std::optional<double> target_power;  ///< [W]
    std::optional<double> v_in;          ///< [V]
    std::optional<double> v_out;         ///< [V]
    std::optional<Algorithm> optimizer;

    [[nodiscard]] bool has(Field f) const;
    void clear(Field f);
    /// Copies the fields of `other` that are set and listed in `fields`.
    void merge(const DesignSpec& other, const std::vector<Field>& fields);
    [[nodiscard]] std::vector<Field> missing() const;
    [[nodiscard]] bool complete() const { return missing().empty(); }

    bool operator==(const DesignSpec&) const = default;
};

struct Violation {
    Field field = Field::Strategy;
    std::string message;  ///< e.g. "target_power ∉ (0, 200]"
};

struct SpecCheck {
    std::vector<Violation> violations;
    /// Active search bounds for the chosen strategy, when it is set.
    std::string bounds;

    [[nodiscard]] bool ok() const { return violations.empty(); }
};

/// Checks every populated field against the grounding.
[[nodiscard]] SpecCheck validate_spec(const DesignSpec& spec, const GroundingContext& g);

// =============================================================================
// LLM client
// =============================================================================

struct LlmClientConfig {
    std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
    std::string model = "gpt-4";
    double temperature = 0.0;
    double timeout_seconds = 30.0;
    std::string api_key_env = "DABMOD_LLM_API_KEY";
    bool enabled = false;
    double min_interval_seconds = 0.0;  ///< spacing between requests

    void validate() const;
};

struct ChatMessage {
    std::string role;  ///< "system", "user" or "assistant"
    std::string content;
};

/// Raised on transport or protocol failures.
class LlmError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Chat-completion style exchange. Implementations must be safe to share
/// between sessions.
class LlmClient {
public:
    virtual ~LlmClient() = default;
    /// Assistant text for the conversation; throws LlmError on failure.
    [[nodiscard]] virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

/// Posts {model, temperature, messages} to an HTTP endpoint and reads
/// choices[0].message.content. Requests are serialized and spaced by
/// min_interval_seconds. Only plain http endpoints are supported.
class HttpLlmClient final : public LlmClient {
public:
    explicit HttpLlmClient(LlmClientConfig cfg);
    [[nodiscard]] std::string complete(const std::vector<ChatMessage>& messages) override;
    [[nodiscard]] const LlmClientConfig& config() const { return cfg_; }

private:
    LlmClientConfig cfg_;
    std::mutex mutex_;
    std::chrono::steady_clock::time_point last_{};
};

// =============================================================================
// Extraction
// =============================================================================

struct Extraction {
    DesignSpec fields;          ///< only expected fields are set
    bool degraded = false;      ///< the LLM path failed and the rules were used
    std::string degraded_reason;
    std::string source = "rules";  ///< "rules" or "llm"
};

/// Rule-based extraction: strategy/objective/optimizer keywords matched
/// case-insensitively, numbers with W/V units (optional k or m prefix),
/// assigned by nearby words ("input", "output", "power", ...).
[[nodiscard]] DesignSpec extract_with_rules(std::string_view text, const std::vector<Field>& expected);

/// Parses a JSON object reply (fields named as in to_string(Field)); values
/// may be names, numbers or numbers with units. Throws ValidationError.
[[nodiscard]] DesignSpec parse_llm_reply(std::string_view reply, const std::vector<Field>& expected);

/// The LLM path when `llm` is non-null, otherwise (or on failure) the rules.
[[nodiscard]] Extraction extract_fields(std::string_view user_text, const std::vector<Field>& expected,
                                        const GroundingContext& g, LlmClient* llm = nullptr,
                                        const std::vector<ChatMessage>& history = {});

/// Parses "200 W", "200W", "0.2 kW", "160V" into base units.
[[nodiscard]] std::optional<double> parse_quantity(std::string_view text, char unit);

// =============================================================================
// Design run
// =============================================================================

/// Analysis engines and their settings. Every random choice is seeded here.
struct Engines {
    std::shared_ptr<const surrogate::SurrogatePair> pair;  ///< optional; oracle search when null
    std::size_t oracle_samples = 512;
    optimizer::PsoConfig pso;
    optimizer::GaConfig ga;
    std::size_t landscape_resolution = 12;
    /// Local oracle search around a surrogate optimum whose verified power
    /// misses the tolerance band.
    bool refine_with_oracle = true;
    optimizer::PsoConfig refine_pso{20, 40, 0.72, 1.49, 1.49, 0};
    double refine_half_width = 0.0625;  ///< box half-width around the surrogate optimum

    void validate() const;
};

struct AnalysisSection {
    std::string title;
    std::string text;
};

struct Verification {
    physics::PerformanceMetrics surrogate;  ///< surrogate prediction at the search optimum
    physics::PerformanceMetrics oracle;     ///< oracle at the search optimum
    bool search_feasible = false;           ///< oracle power within tolerance at the search optimum
    bool refined = false;                   ///< the final design came from the oracle refinement
};

struct DesignTiming {
    double total_seconds = 0.0;
    double search_seconds = 0.0;
    double verification_seconds = 0.0;
    double landscape_seconds = 0.0;
    double comparison_seconds = 0.0;
};

struct DesignReport {
    DesignSpec spec;
    ConverterParams converter;  ///< at the requested link voltages
    optimizer::SearchSpace space;
    optimizer::ObjectiveSpec objective;
    optimizer::OptimizationResult search;  ///< with the search evaluator
    Verification verification;             ///< only meaningful for surrogate searches
    physics::ModulationParams design;      ///< final modulation
    physics::PerformanceMetrics metrics;   ///< oracle metrics of the design
    double fitness = 0.0;
    bool feasible = false;
    std::optional<optimizer::StrategyComparison> comparison;  ///< absent if SPS cannot reach the target
    std::string comparison_note;
    optimizer::Landscape landscape;
    physics::Waveform waveform;  ///< oracle steady state of the design
    std::vector<AnalysisSection> analysis;
    DesignTiming timing;
};

/// Builds the search from the spec, runs it against the surrogate when a
/// pair is given (then verifies with the oracle) or against the oracle, and
/// attaches landscape, comparison, waveform and analysis text. Throws
/// ValidationError for an incomplete or invalid spec; infeasible targets are
/// reported, not thrown.
[[nodiscard]] DesignReport run_design(const DesignSpec& spec, const ConverterParams& cp, const Engines& engines,
                                      const GroundingContext& g);

/// report.json content: everything except timing, so identical inputs give
/// identical bytes.
[[nodiscard]] nlohmann::json report_artifact(const DesignReport& r);

/// Writes report.json, landscape.csv, landscape.json, waveform.csv and
/// timing.json into `dir` (created if needed); returns the file names.
std::vector<std::string> write_report_artifacts(const std::filesystem::path& dir, const DesignReport& r);

// =============================================================================
// State machine
// =============================================================================

enum class Phase { CollectStrategy, CollectObjective, CollectConditions, CollectOptimizer, Running, Presenting, Done };

[[nodiscard]] std::string_view to_string(Phase p);
[[nodiscard]] Phase phase_from_string(std::string_view s);
/// Fields a phase collects (empty for the others).
[[nodiscard]] std::vector<Field> expected_fields(Phase p);

enum class Role { User, Assistant };

[[nodiscard]] std::string_view to_string(Role r);

struct ChatTurn {
    Role role = Role::User;
    std::string text;
    std::int64_t timestamp_ms = 0;  ///< Unix epoch milliseconds
    Phase phase = Phase::CollectStrategy;  ///< phase after the turn
    nlohmann::json extraction;  ///< structured extraction for user turns; null otherwise
};

struct DialogueState {
    Phase phase = Phase::CollectStrategy;
    DesignSpec spec;
    std::vector<ChatTurn> transcript;
    std::optional<DesignReport> report;
    bool degraded = false;  ///< some turn fell back from the LLM to the rules
    std::string last_error;
};

/// Raised when a message arrives for a finished dialogue.
class DialogueFinishedError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct Dependencies {
    ConverterParams cp;
    GroundingContext grounding;
    Engines engines;
    LlmClient* llm = nullptr;
    std::function<std::int64_t()> clock;  ///< epoch milliseconds; system clock when empty

    [[nodiscard]] static Dependencies for_converter(const ConverterParams& cp);
};

struct AdvanceResult {
    DialogueState state;
    std::string reply;
};

/// Greeting shown before the first user turn.
[[nodiscard]] std::string welcome_text(const GroundingContext& g);

/// Handles one user turn. Throws DialogueFinishedError in phase Done.
[[nodiscard]] AdvanceResult advance(const DialogueState& state, std::string_view user_text,
                                    const Dependencies& deps);

// =============================================================================
// Serialization
// =============================================================================

void to_json(nlohmann::json& j, const GroundingContext& g);
void from_json(const nlohmann::json& j, GroundingContext& g);
void to_json(nlohmann::json& j, const DesignSpec& s);
void from_json(const nlohmann::json& j, DesignSpec& s);
void to_json(nlohmann::json& j, const LlmClientConfig& c);
void from_json(const nlohmann::json& j, LlmClientConfig& c);
void to_json(nlohmann::json& j, const Engines& e);  ///< settings only, not the pair
void from_json(const nlohmann::json& j, Engines& e);
void to_json(nlohmann::json& j, const DesignReport& r);
void from_json(const nlohmann::json& j, DesignReport& r);
void to_json(nlohmann::json& j, const ChatTurn& t);
void from_json(const nlohmann::json& j, ChatTurn& t);
void to_json(nlohmann::json& j, const DialogueState& s);
void from_json(const nlohmann::json& j, DialogueState& s);

}  // namespace dabmod::dialogue
