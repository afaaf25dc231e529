#include "dabmod/dialogue.hpp"
#include "dabmod/errors.hpp"

#include <catch_amalgamated.hpp>
#include <fmt/core.h>
#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

using namespace dabmod;
using namespace dabmod::dialogue;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::StartsWith;
using physics::ModulationParams;

namespace {

const ConverterParams kFixture = physics::fixture_converter();

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Compares against a golden file; DABMOD_UPDATE_GOLDEN rewrites it.
void check_golden(const std::string& name, const std::string& text) {
    const std::filesystem::path path = std::filesystem::path(DABMOD_GOLDEN_DIR) / name;
    if (std::getenv("DABMOD_UPDATE_GOLDEN") != nullptr) {
        std::ofstream(path, std::ios::binary) << text;
    }
    REQUIRE(std::filesystem::exists(path));
    CHECK(read_file(path) == text);
}

std::size_t count_occurrences(const std::string& text, std::string_view word) {
    std::size_t n = 0;
    for (std::size_t pos = text.find(word); pos != std::string::npos; pos = text.find(word, pos + 1)) ++n;
    return n;
}

/// Small search budgets so a full dialogue runs in well under a second.
Dependencies quick_deps() {
    Dependencies d = Dependencies::for_converter(kFixture);
    d.engines.pso = {20, 40, 0.72, 1.49, 1.49, 0};
    d.engines.ga = {20, 40, 2, 0.9, 15.0, 20.0, 0.0, 2, 0};
    d.engines.landscape_resolution = 6;
    d.clock = [] { return std::int64_t{1'700'000'000'000}; };
    return d;
}

const std::vector<std::string> kScript{
    "Hi, I need help with a modulation design.",
    "I want triple phase shift",
    "Minimize the current stress please",
    "The target power is 200 W, input voltage 200 V and output voltage 160 V",
    "Use PSO",
    "Show me the results",
};

DialogueState run_script(const Dependencies& deps, const std::vector<std::string>& script) {
    DialogueState s;
    for (const auto& line : script) s = advance(s, line, deps).state;
    return s;
}

DesignSpec full_spec(Strategy strategy, Algorithm algorithm, double power = 200.0) {
    DesignSpec s;
    s.strategy = strategy;
    s.objective = Goal::MinCurrentStress;
    s.target_power = power;
    s.v_in = 200.0;
    s.v_out = 160.0;
    s.optimizer = algorithm;
    return s;
}

/// Scripted LLM: returns queued replies or throws when told to.
class FakeLlm : public LlmClient {
public:
    std::vector<std::string> replies;
    bool fail = false;
    std::vector<std::vector<ChatMessage>> calls;

    std::string complete(const std::vector<ChatMessage>& messages) override {
        calls.push_back(messages);
        if (fail) throw LlmError("connection refused");
        if (replies.empty()) return "no idea";
        std::string r = replies.front();
        replies.erase(replies.begin());
        return r;
    }
};

std::shared_ptr<const surrogate::SurrogatePair> untrained_pair(std::uint64_t seed) {
    const physics::SamplingGrid grid(kFixture.f_s, 128);
    return std::make_shared<const surrogate::SurrogatePair>(surrogate::SurrogatePair{
        nn::init_network(surrogate::kModNetInputs, {6, 5}, surrogate::kModNetOutputs, seed),
        nn::init_network(surrogate::kCirNetInputs, {5}, surrogate::kCirNetOutputs, seed + 1),
        surrogate::Normalization::for_converter(kFixture, grid), grid, nlohmann::json::object()});
}

}  // namespace

// =============================================================================
// Grounding and prompt
// =============================================================================

TEST_CASE("prompt starts with the persona and joins four parts with the delimiter", "[dialogue][prompt]") {
    const auto g = GroundingContext::for_converter(kFixture);
    const std::string prompt = assemble_pe_prompt(PromptTemplate::standard(g));
    CHECK_THAT(prompt, StartsWith("assistant to electrical engineer responsible for documenting modulation design "
                                  "specifications"));
    CHECK(count_occurrences(prompt, kPromptDelimiter) == 3);

    PromptTemplate t{"A", "B", "C", "D"};
    CHECK(assemble_pe_prompt(t) == "A\n---\nB\n---\nC\n---\nD");
    CHECK(assemble_pe_prompt(t, "|") == "A|B|C|D");
}

TEST_CASE("an empty prompt part is rejected by name", "[dialogue][prompt]") {
    PromptTemplate t{"A", "B", "", "D"};
    CHECK_THROWS_WITH(assemble_pe_prompt(t), ContainsSubstring("ground_c"));
}

TEST_CASE("grounding lists every allowed option exactly once", "[dialogue][prompt]") {
    const auto g = GroundingContext::for_converter(kFixture);
    const std::string ground = PromptTemplate::standard(g).ground_c;
    for (const std::string_view name : {"SPS", "EPS", "DPS", "TPS", "min_current_stress", "min_rms_current",
                                        "max_zvs_range", "PSO", "GA"}) {
        INFO(name);
        CHECK(count_occurrences(ground, name) == 1);
    }
    CHECK_THAT(ground, ContainsSubstring("(0, 200] W"));
    CHECK_THAT(ground, ContainsSubstring("[180, 220] V"));
    CHECK_THAT(ground, ContainsSubstring("[144, 176] V"));
}

TEST_CASE("standard prompt matches the golden file", "[dialogue][prompt][golden]") {
    const auto g = GroundingContext::for_converter(kFixture);
    check_golden("prompt_fixture.txt", assemble_pe_prompt(PromptTemplate::standard(g)) + "\n");
}

TEST_CASE("grounding validation rejects inconsistent ranges", "[dialogue][prompt]") {
    auto g = GroundingContext::for_converter(kFixture);
    CHECK_NOTHROW(g.validate(kFixture));
    auto bad = g;
    bad.p_rated = 500.0;
    CHECK_THROWS_AS(bad.validate(kFixture), ValidationError);
    bad = g;
    bad.strategies.clear();
    CHECK_THROWS_AS(bad.validate(kFixture), ValidationError);
    bad = g;
    bad.v_in_min = 205.0;
    CHECK_THROWS_AS(bad.validate(kFixture), ValidationError);
    bad = g;
    bad.d_min = 0.0;
    CHECK_THROWS_AS(bad.validate(kFixture), ValidationError);
}

// =============================================================================
// Extraction
// =============================================================================

TEST_CASE("rule extractor reads the strategy", "[dialogue][extract]") {
    const std::vector<Field> f{Field::Strategy};
    CHECK(extract_with_rules("I want triple phase shift", f).strategy == Strategy::TPS);
    CHECK(extract_with_rules("Let's go with Triple-Phase-Shift", f).strategy == Strategy::TPS);
    CHECK(extract_with_rules("dual_phase_shift", f).strategy == Strategy::DPS);
    CHECK(extract_with_rules("EPS please", f).strategy == Strategy::EPS);
    CHECK(extract_with_rules("plain sps", f).strategy == Strategy::SPS);
    CHECK(extract_with_rules("TPS, not SPS", f).strategy == Strategy::TPS);
    CHECK_FALSE(extract_with_rules("steps and apps", f).strategy.has_value());
    CHECK_FALSE(extract_with_rules("something else", f).strategy.has_value());
}

TEST_CASE("rule extractor reads objective and optimizer", "[dialogue][extract]") {
    CHECK(extract_with_rules("minimize the current stress", {Field::Objective}).objective == Goal::MinCurrentStress);
    CHECK(extract_with_rules("lowest RMS current", {Field::Objective}).objective == Goal::MinRmsCurrent);
    CHECK(extract_with_rules("widest ZVS range", {Field::Objective}).objective == Goal::MaxZvsRange);
    CHECK(extract_with_rules("use PSO", {Field::Optimizer}).optimizer == Algorithm::PSO);
    CHECK(extract_with_rules("a genetic algorithm", {Field::Optimizer}).optimizer == Algorithm::GA);
    CHECK(extract_with_rules("GA", {Field::Optimizer}).optimizer == Algorithm::GA);
    CHECK_FALSE(extract_with_rules("gap analysis", {Field::Optimizer}).optimizer.has_value());
}

TEST_CASE("rule extractor reads operating conditions", "[dialogue][extract]") {
    const std::vector<Field> f{Field::TargetPower, Field::VIn, Field::VOut};
    const auto s = extract_with_rules("The target power is 200 W, input voltage 200 V and output voltage 160 V", f);
    CHECK(s.target_power == 200.0);
    CHECK(s.v_in == 200.0);
    CHECK(s.v_out == 160.0);

    const auto reversed = extract_with_rules("output 150V, input 210 V, power 0.1 kW", f);
    CHECK(reversed.v_out == 150.0);
    CHECK(reversed.v_in == 210.0);
    CHECK(reversed.target_power == Catch::Approx(100.0));

    const auto unlabelled = extract_with_rules("200V to 160V at 180W", f);
    CHECK(unlabelled.v_in == 200.0);
    CHECK(unlabelled.v_out == 160.0);
    CHECK(unlabelled.target_power == 180.0);

    CHECK(extract_with_rules("make it 5000 W", f).target_power == 5000.0);
    CHECK(extract_with_rules("150 watts", f).target_power == 150.0);
    CHECK_FALSE(extract_with_rules("about two hundred", f).target_power.has_value());
}

TEST_CASE("rule extractor keeps only expected fields", "[dialogue][extract]") {
    const auto s = extract_with_rules("TPS with PSO at 200 W", {Field::Strategy});
    CHECK(s.strategy == Strategy::TPS);
    CHECK_FALSE(s.optimizer.has_value());
    CHECK_FALSE(s.target_power.has_value());
}

TEST_CASE("quantities parse unit prefixes", "[dialogue][extract]") {
    CHECK(parse_quantity("200 W", 'W') == 200.0);
    CHECK(parse_quantity("200W", 'W') == 200.0);
    CHECK(parse_quantity("0.2 kW", 'W') == Catch::Approx(200.0));
    CHECK(parse_quantity("1.5KW", 'W') == Catch::Approx(1500.0));
    CHECK(parse_quantity("160000 mV", 'V') == Catch::Approx(160.0));
    CHECK(parse_quantity("160 volts", 'V') == 160.0);
    CHECK(parse_quantity("42", 'V') == 42.0);
    CHECK_FALSE(parse_quantity("200 V", 'W').has_value());
    CHECK_FALSE(parse_quantity("abc", 'W').has_value());
    CHECK_FALSE(parse_quantity("5 k", 'W').has_value());
}

TEST_CASE("extraction never invents fields on random text", "[dialogue][extract][property]") {
    std::mt19937_64 rng(7);
    const std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789 .,-_";
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::uniform_int_distribution<std::size_t> length(0, 60);
    std::uniform_int_distribution<int> subset(1, 63);
    for (int trial = 0; trial < 300; ++trial) {
        std::string text;
        for (std::size_t k = length(rng); k > 0; --k) text.push_back(alphabet[pick(rng)]);
        std::vector<Field> expected;
        const int mask = subset(rng);
        for (std::size_t b = 0; b < kAllFields.size(); ++b) {
            if ((mask >> b) & 1) expected.push_back(kAllFields[b]);
        }
        const DesignSpec s = extract_with_rules(text, expected);
        for (const Field f : kAllFields) {
            if (std::find(expected.begin(), expected.end(), f) == expected.end()) {
                INFO(text);
                CHECK_FALSE(s.has(f));
            }
        }
    }
}

TEST_CASE("LLM replies are parsed from the embedded JSON object", "[dialogue][extract][llm]") {
    const std::vector<Field> f{Field::TargetPower, Field::VIn, Field::VOut};
    const auto s = parse_llm_reply("Sure! {\"target_power\": \"0.15 kW\", \"v_in\": 200, \"v_out\": null} done", f);
    CHECK(s.target_power == Catch::Approx(150.0));
    CHECK(s.v_in == 200.0);
    CHECK_FALSE(s.v_out.has_value());
    CHECK(parse_llm_reply("{\"strategy\": \"triple phase shift\"}", {Field::Strategy}).strategy == Strategy::TPS);
    CHECK_THROWS_AS(parse_llm_reply("no json here", f), ValidationError);
    CHECK_THROWS_AS(parse_llm_reply("{\"v_in\": \"lots\"}", f), ValidationError);
    CHECK_THROWS_AS(parse_llm_reply("{\"strategy\": \"QPS\"}", {Field::Strategy}), ValidationError);
}

TEST_CASE("extraction uses the LLM when it answers", "[dialogue][extract][llm]") {
    const auto g = GroundingContext::for_converter(kFixture);
    FakeLlm llm;
    llm.replies = {"{\"strategy\": \"DPS\"}"};
    const auto ex = extract_fields("whatever you think", {Field::Strategy}, g, &llm);
    CHECK(ex.source == "llm");
    CHECK_FALSE(ex.degraded);
    CHECK(ex.fields.strategy == Strategy::DPS);
    REQUIRE(llm.calls.size() == 1);
    CHECK(llm.calls[0].front().role == "system");
    CHECK_THAT(llm.calls[0].front().content, StartsWith("assistant to electrical engineer"));
}

TEST_CASE("extraction falls back to the rules when the LLM fails", "[dialogue][extract][llm]") {
    const auto g = GroundingContext::for_converter(kFixture);
    FakeLlm llm;
    llm.fail = true;
    const auto ex = extract_fields("I want triple phase shift", {Field::Strategy}, g, &llm);
    CHECK(ex.degraded);
    CHECK_THAT(ex.degraded_reason, ContainsSubstring("connection refused"));
    CHECK(ex.source == "rules");
    CHECK(ex.fields.strategy == Strategy::TPS);

    llm.fail = false;
    llm.replies = {"I cannot answer that"};
    const auto garbled = extract_fields("use GA", {Field::Optimizer}, g, &llm);
    CHECK(garbled.degraded);
    CHECK(garbled.fields.optimizer == Algorithm::GA);
}

TEST_CASE("HTTP LLM client talks to a chat completions endpoint", "[dialogue][llm][http]") {
    httplib::Server server;
    nlohmann::json seen;
    std::string auth;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        auth = req.get_header_value("Authorization");
        const nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "{\"v_in\": 190}"}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    server.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
        res.status = 500;
        res.set_content("oops", "text/plain");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ::setenv("DABMOD_TEST_LLM_KEY", "secret", 1);
    LlmClientConfig cfg;
    cfg.endpoint = fmt::format("http://127.0.0.1:{}/v1/chat/completions", port);
    cfg.model = "test-model";
    cfg.api_key_env = "DABMOD_TEST_LLM_KEY";
    cfg.timeout_seconds = 5.0;
    HttpLlmClient client(cfg);
    const std::string text = client.complete({{"system", "s"}, {"user", "u"}});
    CHECK(text == "{\"v_in\": 190}");
    CHECK(seen.at("model") == "test-model");
    CHECK(seen.at("messages").size() == 2);
    CHECK(seen.at("messages")[1].at("content") == "u");
    CHECK(auth == "Bearer secret");

    cfg.endpoint = fmt::format("http://127.0.0.1:{}/broken", port);
    HttpLlmClient broken(cfg);
    CHECK_THROWS_AS(broken.complete({{"user", "u"}}), LlmError);

    server.stop();
    worker.join();

    // Nothing listens on the port any more.
    cfg.endpoint = fmt::format("http://127.0.0.1:{}/v1/chat/completions", port);
    cfg.timeout_seconds = 1.0;
    HttpLlmClient gone(cfg);
    CHECK_THROWS_AS(gone.complete({{"user", "u"}}), LlmError);
    CHECK_THROWS_AS(HttpLlmClient(LlmClientConfig{"https://example.com/x"}), LlmError);
}

// =============================================================================
// Specification checks
// =============================================================================

TEST_CASE("specification violations name the field, range and value", "[dialogue][spec]") {
    const auto g = GroundingContext::for_converter(kFixture);
    DesignSpec s;
    s.target_power = 5000.0;
    s.v_in = 100.0;
    const auto check = validate_spec(s, g);
    REQUIRE(check.violations.size() == 2);
    CHECK(check.violations[0].field == Field::TargetPower);
    CHECK(check.violations[0].message == "target_power ∉ (0, 200] (got 5000 W)");
    CHECK(check.violations[1].message == "v_in ∉ [180, 220] (got 100 V)");
    CHECK_FALSE(check.ok());

    auto narrow = g;
    narrow.strategies = {Strategy::SPS, Strategy::TPS};
    s = DesignSpec{};
    s.strategy = Strategy::DPS;
    const auto c2 = validate_spec(s, narrow);
    REQUIRE(c2.violations.size() == 1);
    CHECK(c2.violations[0].message == "strategy ∉ {SPS, TPS} (got DPS)");
    CHECK(c2.bounds == "DPS bounds: d0 ∈ [0, 0.5], d1 = d2 ∈ [0.1, 1]");

    CHECK(validate_spec(full_spec(Strategy::TPS, Algorithm::PSO), g).ok());
    s = DesignSpec{};
    s.target_power = 0.0;
    CHECK_FALSE(validate_spec(s, g).ok());
}

TEST_CASE("spec merge, missing and JSON round trip", "[dialogue][spec][json]") {
    DesignSpec a;
    a.strategy = Strategy::SPS;
    DesignSpec b = full_spec(Strategy::TPS, Algorithm::GA);
    a.merge(b, {Field::Objective, Field::VIn});
    CHECK(a.strategy == Strategy::SPS);
    CHECK(a.objective == Goal::MinCurrentStress);
    CHECK(a.v_in == 200.0);
    CHECK_FALSE(a.v_out.has_value());
    CHECK(a.missing() == std::vector<Field>{Field::TargetPower, Field::VOut, Field::Optimizer});
    CHECK_FALSE(a.complete());
    CHECK(b.complete());

    for (const DesignSpec& s : {a, b, DesignSpec{}}) {
        const nlohmann::json j = s;
        CHECK(j.get<DesignSpec>() == s);
    }
    for (const Field f : kAllFields) CHECK(field_from_string(to_string(f)) == f);
    CHECK_THROWS_AS(field_from_string("power"), ValidationError);
}

// =============================================================================
// Design run
// =============================================================================

TEST_CASE("oracle design at 200 W beats SPS current stress", "[dialogue][design]") {
    const Dependencies d = quick_deps();
    const auto r = run_design(full_spec(Strategy::TPS, Algorithm::PSO), kFixture, d.engines, d.grounding);
    CHECK(r.feasible);
    CHECK(r.search.evaluator == "oracle");
    CHECK(std::abs(r.metrics.p_avg - 200.0) <= 0.01 * 200.0);
    REQUIRE(r.comparison.has_value());
    CHECK(r.metrics.i_pp <= r.comparison->sps_metrics.i_pp);
    CHECK(r.analysis.size() == 4);
    CHECK(r.waveform.size() == d.engines.oracle_samples);
    CHECK(r.landscape.samples.size() == 6 * 6 * 6);
}

TEST_CASE("PSO and GA designs agree within two percent", "[dialogue][design]") {
    const Dependencies d = quick_deps();
    const auto pso = run_design(full_spec(Strategy::TPS, Algorithm::PSO), kFixture, d.engines, d.grounding);
    const auto ga = run_design(full_spec(Strategy::TPS, Algorithm::GA), kFixture, d.engines, d.grounding);
    CHECK(ga.search.algorithm == "GA");
    CHECK(std::abs(ga.fitness - pso.fitness) <= 0.02 * pso.fitness);
}

TEST_CASE("every strategy designs no worse than SPS", "[dialogue][design]") {
    const Dependencies d = quick_deps();
    const auto sps = run_design(full_spec(Strategy::SPS, Algorithm::PSO), kFixture, d.engines, d.grounding);
    for (const Strategy s : {Strategy::EPS, Strategy::DPS, Strategy::TPS}) {
        const auto r = run_design(full_spec(s, Algorithm::PSO), kFixture, d.engines, d.grounding);
        INFO(physics::to_string(s));
        CHECK(r.metrics.i_pp <= sps.metrics.i_pp + 1e-9);
    }
}

TEST_CASE("unreachable power is reported as infeasible", "[dialogue][design]") {
    Dependencies d = quick_deps();
    d.grounding.p_rated = kFixture.p_rated;
    // SPS tops out near 667 W, but at 40% of the nominal voltages only about 107 W.
    auto spec = full_spec(Strategy::SPS, Algorithm::PSO, 190.0);
    auto g = d.grounding;
    g.v_in_min = 50.0;
    g.v_out_min = 50.0;
    spec.v_in = 80.0;
    spec.v_out = 64.0;
    const auto r = run_design(spec, kFixture, d.engines, g);
    CHECK_FALSE(r.feasible);
    CHECK(r.metrics.p_avg < 150.0);
    CHECK_THAT(r.analysis[0].text, ContainsSubstring("infeasible"));
}

TEST_CASE("incomplete or out-of-range specifications do not run", "[dialogue][design]") {
    const Dependencies d = quick_deps();
    DesignSpec partial = full_spec(Strategy::TPS, Algorithm::PSO);
    partial.v_out.reset();
    CHECK_THROWS_WITH(run_design(partial, kFixture, d.engines, d.grounding), ContainsSubstring("v_out"));
    CHECK_THROWS_AS(run_design(full_spec(Strategy::TPS, Algorithm::PSO, 900.0), kFixture, d.engines, d.grounding),
                    ValidationError);
    Engines bad = d.engines;
    bad.oracle_samples = 100;
    CHECK_THROWS_AS(run_design(full_spec(Strategy::TPS, Algorithm::PSO), kFixture, bad, d.grounding),
                    ValidationError);
}

TEST_CASE("surrogate designs are verified on the oracle", "[dialogue][design][surrogate]") {
    Dependencies d = quick_deps();
    d.engines.landscape_resolution = 3;
    d.engines.pso = {8, 10, 0.72, 1.49, 1.49, 0};
    d.engines.refine_pso = {8, 10, 0.72, 1.49, 1.49, 0};
    d.engines.pair = untrained_pair(3);
    const auto r = run_design(full_spec(Strategy::TPS, Algorithm::PSO), kFixture, d.engines, d.grounding);
    CHECK(r.search.evaluator == "surrogate");
    CHECK(r.landscape.evaluator == "surrogate");
    // The reported metrics always come from the oracle.
    const physics::SamplingGrid grid(kFixture.f_s, d.engines.oracle_samples);
    const auto oracle = optimizer::Evaluator::oracle(grid).evaluate(r.converter, {r.design, 200.0, 160.0});
    CHECK(r.metrics.p_avg == Catch::Approx(oracle.p_avg).epsilon(1e-12));
    CHECK(r.metrics.i_pp == Catch::Approx(oracle.i_pp).epsilon(1e-12));
    if (!r.verification.search_feasible) CHECK(r.verification.refined);
    CHECK_THAT(r.analysis[1].text, ContainsSubstring("oracle check"));

    Engines misaligned = d.engines;
    misaligned.oracle_samples = 200;
    CHECK_THROWS_AS(misaligned.validate(), ValidationError);
}

TEST_CASE("report JSON round trips and excludes timing from the artifact", "[dialogue][design][json]") {
    const Dependencies d = quick_deps();
    const auto r = run_design(full_spec(Strategy::DPS, Algorithm::GA), kFixture, d.engines, d.grounding);
    const nlohmann::json j = r;
    const auto back = j.get<DesignReport>();
    CHECK(nlohmann::json(back) == j);
    const nlohmann::json artifact = report_artifact(r);
    CHECK_FALSE(artifact.contains("timing"));
    CHECK(artifact.contains("landscape"));

    const auto again = run_design(full_spec(Strategy::DPS, Algorithm::GA), kFixture, d.engines, d.grounding);
    CHECK(report_artifact(again).dump() == artifact.dump());

    const auto dir = std::filesystem::temp_directory_path() / "dabmod_test_report";
    std::filesystem::remove_all(dir);
    const auto files = write_report_artifacts(dir, r);
    CHECK(files.size() == 5);
    for (const auto& f : files) CHECK(std::filesystem::exists(dir / f));
    CHECK(nlohmann::json::parse(read_file(dir / "report.json")) == artifact);
    CHECK(nlohmann::json::parse(read_file(dir / "timing.json")).contains("total_seconds"));
    CHECK_THAT(read_file(dir / "landscape.csv"), StartsWith("d0,d1,d2"));
    std::filesystem::remove_all(dir);
}

// =============================================================================
// State machine
// =============================================================================

TEST_CASE("scripted dialogue reaches Done with a report", "[dialogue][fsm]") {
    const Dependencies d = quick_deps();
    DialogueState s;
    std::vector<Phase> phases;
    for (const auto& line : kScript) {
        s = advance(s, line, d).state;
        phases.push_back(s.phase);
    }
    CHECK(phases == std::vector<Phase>{Phase::CollectStrategy, Phase::CollectObjective, Phase::CollectConditions,
                                       Phase::CollectOptimizer, Phase::Presenting, Phase::Done});
    REQUIRE(s.report.has_value());
    CHECK(s.report->feasible);
    CHECK(s.transcript.size() == 2 * kScript.size());
    CHECK_THAT(s.transcript.back().text, ContainsSubstring("Strategy comparison"));
    CHECK_THROWS_AS(advance(s, "again", d), DialogueFinishedError);
}

TEST_CASE("scripted transcript matches the golden file", "[dialogue][fsm][golden]") {
    const DialogueState s = run_script(quick_deps(), kScript);
    std::string text;
    for (const auto& t : s.transcript) {
        text += fmt::format("[{} | {}]\n{}\n\n", to_string(t.role), to_string(t.phase), t.text);
    }
    check_golden("transcript_fixture.txt", text);
}

TEST_CASE("the first strategy question recommends TPS", "[dialogue][fsm]") {
    const auto r = advance(DialogueState{}, "hello", quick_deps());
    CHECK(r.state.phase == Phase::CollectStrategy);
    CHECK_THAT(r.reply, ContainsSubstring("I recommend TPS"));
    for (const std::string_view s : {"SPS", "EPS", "DPS", "TPS"}) CHECK_THAT(r.reply, ContainsSubstring(std::string(s)));
}

TEST_CASE("an out-of-range value keeps the phase and cites the violation", "[dialogue][fsm]") {
    const Dependencies d = quick_deps();
    DialogueState s = run_script(d, {"TPS", "current stress"});
    REQUIRE(s.phase == Phase::CollectConditions);
    const auto r = advance(s, "make it 5000 W", d);
    CHECK(r.state.phase == Phase::CollectConditions);
    CHECK_THAT(r.reply, ContainsSubstring("target_power ∉ (0, 200] (got 5000 W)"));
    CHECK_FALSE(r.state.spec.target_power.has_value());
}

TEST_CASE("partial conditions are remembered and the rest requested", "[dialogue][fsm]") {
    const Dependencies d = quick_deps();
    DialogueState s = run_script(d, {"TPS", "current stress"});
    auto r = advance(s, "power 150 W", d);
    CHECK(r.state.phase == Phase::CollectConditions);
    CHECK(r.state.spec.target_power == 150.0);
    CHECK_THAT(r.reply, ContainsSubstring("I still need v_in, v_out"));
    r = advance(r.state, "input 200 V, output 160 V", d);
    CHECK(r.state.phase == Phase::CollectOptimizer);
    CHECK(r.state.spec.target_power == 150.0);
    CHECK(r.state.spec.v_out == 160.0);
}

TEST_CASE("phases never move backwards on random input", "[dialogue][fsm][property]") {
    const Dependencies d = quick_deps();
    const std::vector<std::string> pool{"TPS",        "hmm",          "current stress", "5000 W", "200 W",
                                        "200 V",      "output 160 V", "PSO",            "GA",     "rms",
                                        "what now?",  "SPS please",   "input 190 V",    "zvs",    ""};
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int trial = 0; trial < 25; ++trial) {
        DialogueState s;
        for (int step = 0; step < 12 && s.phase != Phase::Done; ++step) {
            const Phase before = s.phase;
            const auto r = advance(s, pool[pick(rng)], d);
            CHECK(static_cast<int>(r.state.phase) >= static_cast<int>(before));
            CHECK(r.state.transcript.size() == s.transcript.size() + 2);
            CHECK_FALSE(r.reply.empty());
            s = r.state;
        }
    }
}

TEST_CASE("identical scripts give identical states", "[dialogue][fsm]") {
    const Dependencies d = quick_deps();
    const auto a = run_script(d, kScript);
    const auto b = run_script(d, kScript);
    nlohmann::json ja = a;
    nlohmann::json jb = b;
    ja["report"].erase("timing");
    jb["report"].erase("timing");
    CHECK(ja == jb);
}

TEST_CASE("a failing LLM marks the session degraded but the dialogue continues", "[dialogue][fsm][llm]") {
    Dependencies d = quick_deps();
    FakeLlm llm;
    llm.fail = true;
    d.llm = &llm;
    const auto s = run_script(d, kScript);
    CHECK(s.phase == Phase::Done);
    CHECK(s.degraded);
    CHECK(llm.calls.size() == 5);
    CHECK(s.transcript[2].extraction.at("degraded").get<std::string>() == "connection refused");
}

TEST_CASE("a failed run returns to the optimizer question", "[dialogue][fsm]") {
    Dependencies d = quick_deps();
    d.engines.oracle_samples = 100;
    DialogueState s = run_script(d, {"TPS", "current stress", "200 W, 200 V, 160 V"});
    REQUIRE(s.phase == Phase::CollectOptimizer);
    const auto r = advance(s, "PSO", d);
    CHECK(r.state.phase == Phase::CollectOptimizer);
    CHECK_FALSE(r.state.last_error.empty());
    CHECK_THAT(r.reply, ContainsSubstring("The design run failed"));
    CHECK_FALSE(r.state.report.has_value());
}

TEST_CASE("dialogue state JSON round trips", "[dialogue][fsm][json]") {
    const Dependencies d = quick_deps();
    for (std::size_t n = 0; n <= kScript.size(); ++n) {
        const DialogueState s =
            run_script(d, std::vector<std::string>(kScript.begin(), kScript.begin() + static_cast<long>(n)));
        const nlohmann::json j = s;
        CHECK(nlohmann::json(j.get<DialogueState>()) == j);
    }
    for (const auto& cfg : {LlmClientConfig{}, LlmClientConfig{"http://h:1/p", "m", 0.5, 3.0, "K", true, 1.0}}) {
        const nlohmann::json j = cfg;
        CHECK(nlohmann::json(j.get<LlmClientConfig>()) == j);
    }
    const nlohmann::json g = d.grounding;
    CHECK(nlohmann::json(g.get<GroundingContext>()) == g);
    const nlohmann::json e = d.engines;
    CHECK(nlohmann::json(e.get<Engines>()) == e);
    CHECK_THROWS_AS(phase_from_string("Sleeping"), ValidationError);
}
