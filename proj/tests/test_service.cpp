#include "dabmod/errors.hpp"
#include "dabmod/physics_io.hpp"
#include "dabmod/service.hpp"

#include <catch_amalgamated.hpp>
#include <fmt/core.h>
#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

using namespace dabmod;
using namespace dabmod::service;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kScript{
    "Hi, I need help with a modulation design.",
    "I want triple phase shift",
    "Minimize the current stress please",
    "The target power is 200 W, input voltage 200 V and output voltage 160 V",
    "Use PSO",
    "Show me the results",
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Fresh data directory removed on scope exit.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dabmod_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

/// Small search budgets; deterministic timestamps.
ApiConfig quick_config(const fs::path& data) {
    ApiConfig cfg;
    cfg.data_dir = data;
    cfg.engines.pso = {20, 40, 0.72, 1.49, 1.49, 0};
    cfg.engines.ga = {20, 40, 2, 0.9, 15.0, 20.0, 0.0, 2, 0};
    cfg.engines.landscape_resolution = 6;
    return cfg;
}

std::unique_ptr<Service> make_service(const fs::path& data) {
    auto svc = std::make_unique<Service>(quick_config(data));
    svc->clock = [] { return std::int64_t{1'700'000'000'000}; };
    return svc;
}

std::string create(Service& svc) {
    const auto r = svc.create_session(nlohmann::json::object());
    REQUIRE(r.status == 201);
    return r.body.at("id").get<std::string>();
}

ApiResponse say(Service& svc, const std::string& id, const std::string& text) {
    return svc.post_message(id, {{"text", text}});
}

int run_cli(const std::string& args) {
    const std::string cmd = fmt::format("\"{}\" {} > /dev/null 2>&1", DABMOD_CLI_PATH, args);
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// =============================================================================
// Configuration
// =============================================================================

TEST_CASE("config validation checks the fixture registry and data directory", "[service][config]") {
    TempDir tmp("config");
    ApiConfig cfg = quick_config(tmp.path / "data");
    CHECK_NOTHROW(cfg.validate());
    CHECK(fs::is_directory(tmp.path / "data"));

    auto bad = cfg;
    bad.default_fixture = "missing";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.fixtures.clear();
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.max_concurrent_designs = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.pair_path = tmp.path / "no_such_pair.json";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    std::ofstream(tmp.path / "file") << "x";
    bad.data_dir = tmp.path / "file" / "sub";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("config JSON round trips and keeps defaults for missing keys", "[service][config][json]") {
    ApiConfig cfg;
    cfg.port = 9000;
    cfg.fixtures["low"] = physics::fixture_converter().at_voltages(100.0, 80.0);
    cfg.pair_path = "pair.json";
    const nlohmann::json j = cfg;
    CHECK(nlohmann::json(j.get<ApiConfig>()) == j);

    const auto partial = nlohmann::json{{"port", 1234}}.get<ApiConfig>();
    CHECK(partial.port == 1234);
    CHECK(partial.listen_host == "127.0.0.1");
    CHECK(partial.fixtures.size() == 1);
    CHECK_FALSE(partial.pair_path.has_value());
}

TEST_CASE("environment overrides listen address, data directory and LLM endpoint", "[service][config]") {
    ::setenv("DABMOD_LISTEN", "0.0.0.0:9123", 1);
    ::setenv("DABMOD_DATA_DIR", "/tmp/dabmod_env_data", 1);
    ::setenv("DABMOD_LLM_ENDPOINT", "http://llm.local:8000/v1/chat/completions", 1);
    ApiConfig cfg;
    cfg.apply_environment();
    CHECK(cfg.listen_host == "0.0.0.0");
    CHECK(cfg.port == 9123);
    CHECK(cfg.data_dir == "/tmp/dabmod_env_data");
    CHECK(cfg.llm.enabled);
    CHECK(cfg.llm.endpoint == "http://llm.local:8000/v1/chat/completions");
    ::setenv("DABMOD_LISTEN", "nonsense", 1);
    CHECK_THROWS_AS(cfg.apply_environment(), ValidationError);
    ::unsetenv("DABMOD_LISTEN");
    ::unsetenv("DABMOD_DATA_DIR");
    ::unsetenv("DABMOD_LLM_ENDPOINT");
}

// =============================================================================
// Session store
// =============================================================================

TEST_CASE("session ids are 32 hex digits", "[service][store]") {
    CHECK(valid_session_id("0123456789abcdef0123456789abcdef"));
    CHECK_FALSE(valid_session_id("0123456789ABCDEF0123456789abcdef"));
    CHECK_FALSE(valid_session_id("../../etc/passwd"));
    CHECK_FALSE(valid_session_id(""));
}

TEST_CASE("an interrupted write leaves the previous record intact", "[service][store]") {
    TempDir tmp("atomic");
    auto svc = make_service(tmp.path);
    const std::string id = create(*svc);
    REQUIRE(say(*svc, id, "TPS").status == 200);
    const std::string before = read_file(svc->store().record_path(id));

    svc->store().before_rename = [](const fs::path& staged) {
        CHECK(fs::exists(staged));
        throw std::runtime_error("simulated crash");
    };
    const auto r = say(*svc, id, "current stress");
    CHECK(r.status == 500);
    CHECK(r.body.at("error") == "storage_error");
    CHECK(read_file(svc->store().record_path(id)) == before);
    CHECK(svc->store().load(id)->state.phase == dialogue::Phase::CollectObjective);

    svc->store().before_rename = nullptr;
    CHECK(say(*svc, id, "current stress").body.at("phase") == "CollectConditions");
}

TEST_CASE("sessions survive a service restart unchanged", "[service][store]") {
    TempDir tmp("restart");
    std::string id;
    nlohmann::json before;
    {
        auto svc = make_service(tmp.path);
        id = create(*svc);
        for (std::size_t k = 0; k < 5; ++k) REQUIRE(say(*svc, id, kScript[k]).status == 200);
        before = svc->get_session(id).body;
    }
    auto again = make_service(tmp.path);
    const auto r = again->get_session(id);
    REQUIRE(r.status == 200);
    CHECK(r.body == before);
    CHECK(r.body.at("state").at("phase") == "Presenting");
    // The restored session carries on where it stopped.
    CHECK(say(*again, id, kScript[5]).body.at("phase") == "Done");
}

// =============================================================================
// Service
// =============================================================================

TEST_CASE("created sessions start collecting the strategy", "[service][api]") {
    TempDir tmp("create");
    auto svc = make_service(tmp.path);
    const auto r = svc->create_session(nullptr);
    CHECK(r.status == 201);
    CHECK(r.body.at("phase") == "CollectStrategy");
    CHECK(valid_session_id(r.body.at("id").get<std::string>()));
    CHECK(svc->create_session({{"fixture", "nope"}}).status == 400);
    CHECK(svc->create_session(nlohmann::json::array()).status == 400);
    CHECK(svc->list_sessions().body.at("sessions").size() == 1);
    CHECK(create(*svc) != r.body.at("id"));
}

TEST_CASE("unknown sessions are not found", "[service][api]") {
    TempDir tmp("unknown");
    auto svc = make_service(tmp.path);
    const std::string ghost(32, 'a');
    CHECK(svc->get_session(ghost).status == 404);
    CHECK(svc->get_session("../secret").status == 404);
    CHECK(say(*svc, ghost, "hi").status == 404);
    CHECK(svc->get_report(ghost).status == 404);
    CHECK(svc->delete_session(ghost).status == 404);
}

TEST_CASE("malformed message bodies get the schema back", "[service][api]") {
    TempDir tmp("malformed");
    auto svc = make_service(tmp.path);
    const std::string id = create(*svc);
    for (const nlohmann::json& body : {nlohmann::json(nullptr), nlohmann::json{{"txt", "hi"}},
                                       nlohmann::json{{"text", 5}}, nlohmann::json::array()}) {
        const auto r = svc->post_message(id, body);
        CHECK(r.status == 400);
        CHECK(r.body.at("schema").at("required") == nlohmann::json{"text"});
    }
}

TEST_CASE("scripted session produces the report artifacts", "[service][api]") {
    TempDir tmp("script");
    auto svc = make_service(tmp.path);
    const std::string id = create(*svc);
    ApiResponse last;
    for (const auto& line : kScript) {
        last = say(*svc, id, line);
        REQUIRE(last.status == 200);
    }
    CHECK(last.body.at("phase") == "Done");
    const auto& ref = last.body.at("report");
    REQUIRE(ref.is_object());
    CHECK(ref.at("href") == fmt::format("/sessions/{}/report", id));
    const fs::path dir = svc->store().artifacts_dir(id);
    for (const char* f : {"report.json", "landscape.csv", "landscape.json", "waveform.csv", "timing.json"}) {
        INFO(f);
        CHECK(fs::exists(dir / f));
        CHECK(svc->artifact_path(id, f).has_value());
    }
    CHECK_FALSE(svc->artifact_path(id, "../sessions").has_value());
    const auto report = svc->get_report(id);
    REQUIRE(report.status == 200);
    CHECK(report.body.at("feasible") == true);
    CHECK_FALSE(report.body.contains("timing"));

    const auto done = say(*svc, id, "one more thing");
    CHECK(done.status == 409);
    CHECK(done.body.at("error") == "conflict");
}

TEST_CASE("a report is only available after the design ran", "[service][api]") {
    TempDir tmp("noreport");
    auto svc = make_service(tmp.path);
    const std::string id = create(*svc);
    const auto r = svc->get_report(id);
    CHECK(r.status == 404);
    CHECK(r.body.at("error") == "no_report");
}

TEST_CASE("a second message while one is in flight is answered busy", "[service][api][concurrency]") {
    TempDir tmp("busy");
    auto svc = make_service(tmp.path);
    const std::string id = create(*svc);
    const std::string other = create(*svc);

    std::mutex m;
    std::condition_variable cv;
    bool entered = false;
    bool release = false;
    svc->on_message = [&](const std::string& sid) {
        if (sid != id) return;
        std::unique_lock lock(m);
        entered = true;
        cv.notify_all();
        cv.wait(lock, [&] { return release; });
    };
    ApiResponse first;
    std::thread worker([&] { first = say(*svc, id, "TPS"); });
    {
        std::unique_lock lock(m);
        cv.wait(lock, [&] { return entered; });
    }
    const auto second = say(*svc, id, "SPS");
    CHECK(second.status == 429);
    CHECK(second.body.at("error") == "busy");
    CHECK(svc->delete_session(id).status == 429);
    // Other sessions are unaffected.
    CHECK(say(*svc, other, "EPS").status == 200);
    {
        std::lock_guard lock(m);
        release = true;
    }
    cv.notify_all();
    worker.join();
    CHECK(first.status == 200);
    CHECK(first.body.at("spec").at("strategy") == "TPS");
}

TEST_CASE("delete removes the record and its artifacts", "[service][api]") {
    TempDir tmp("delete");
    auto svc = make_service(tmp.path);
    const std::string id = create(*svc);
    for (const auto& line : kScript) REQUIRE(say(*svc, id, line).status == 200);
    REQUIRE(fs::exists(svc->store().artifacts_dir(id)));
    CHECK(svc->delete_session(id).status == 200);
    CHECK_FALSE(fs::exists(svc->store().record_path(id)));
    CHECK_FALSE(fs::exists(svc->store().artifacts_dir(id)));
    CHECK(svc->get_session(id).status == 404);
}

TEST_CASE("fixtures list the registry with exactly one default", "[service][api]") {
    TempDir tmp("fixtures");
    ApiConfig cfg = quick_config(tmp.path);
    cfg.fixtures["low_voltage"] = physics::fixture_converter().at_voltages(100.0, 80.0);
    Service svc(cfg);
    const auto list = svc.fixtures().body.at("fixtures");
    REQUIRE(list.size() == 2);
    int defaults = 0;
    for (const auto& f : list) defaults += f.at("default").get<bool>() ? 1 : 0;
    CHECK(defaults == 1);
    const auto r = svc.create_session({{"fixture", "low_voltage"}});
    CHECK(r.status == 201);
    CHECK(r.body.at("fixture") == "low_voltage");
}

TEST_CASE("HTTP routes map onto the service", "[service][http]") {
    TempDir tmp("http");
    auto svc = make_service(tmp.path);
    httplib::Server server;
    mount_routes(server, *svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto res = cli.Get("/fixtures");
    REQUIRE(res);
    CHECK(res->status == 200);
    res = cli.Post("/sessions", "", "application/json");
    REQUIRE(res);
    CHECK(res->status == 201);
    const std::string id = nlohmann::json::parse(res->body).at("id");

    res = cli.Post(fmt::format("/sessions/{}/messages", id), "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(nlohmann::json::parse(res->body).contains("schema"));

    for (const auto& line : kScript) {
        res = cli.Post(fmt::format("/sessions/{}/messages", id), nlohmann::json{{"text", line}}.dump(),
                       "application/json");
        REQUIRE(res);
        REQUIRE(res->status == 200);
    }
    CHECK(nlohmann::json::parse(res->body).at("phase") == "Done");
    res = cli.Get(fmt::format("/sessions/{}/report", id));
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->body == svc->get_report(id).body.dump(2) + "\n");
    res = cli.Get(fmt::format("/sessions/{}/artifacts/waveform.csv", id));
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Content-Type") == "text/csv");
    CHECK(res->body == read_file(svc->store().artifacts_dir(id) / "waveform.csv"));
    res = cli.Get(fmt::format("/sessions/{}/artifacts/secret.txt", id));
    REQUIRE(res);
    CHECK(res->status == 404);
    res = cli.Get(fmt::format("/sessions/{}", std::string(32, 'b')));
    REQUIRE(res);
    CHECK(res->status == 404);
    res = cli.Post(fmt::format("/sessions/{}/messages", id), R"({"text": "again"})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 409);
    res = cli.Get("/sessions");
    REQUIRE(res);
    CHECK(nlohmann::json::parse(res->body).at("sessions").size() == 1);
    res = cli.Delete(fmt::format("/sessions/{}", id));
    REQUIRE(res);
    CHECK(res->status == 200);

    server.stop();
    worker.join();
}

// =============================================================================
// Command line
// =============================================================================

TEST_CASE("CLI design and the service write byte-identical report.json", "[service][cli][parity]") {
    TempDir tmp("parity");
    const ApiConfig cfg = quick_config(tmp.path / "data");
    std::ofstream(tmp.path / "config.json") << nlohmann::json(cfg).dump(2);
    std::ofstream(tmp.path / "spec.json") << R"({"strategy": "TPS", "objective": "min_current_stress",
        "target_power": 200, "v_in": 200, "v_out": 160, "optimizer": "PSO"})";

    Service svc(cfg);
    const std::string id = create(svc);
    for (const auto& line : kScript) REQUIRE(say(svc, id, line).status == 200);

    REQUIRE(run_cli(fmt::format("--config {} design --spec {} --out {}", (tmp.path / "config.json").string(),
                                (tmp.path / "spec.json").string(), (tmp.path / "cli").string())) == 0);
    const std::string from_cli = read_file(tmp.path / "cli" / "report.json");
    CHECK_FALSE(from_cli.empty());
    CHECK(from_cli == read_file(svc.store().artifacts_dir(id) / "report.json"));

    const auto report = nlohmann::json::parse(from_cli);
    CHECK(report.at("comparison").at("i_pp_improvement").get<double>() >= 0.0);

    REQUIRE(run_cli(fmt::format("--data-dir {} export --session {} --out {}", cfg.data_dir.string(), id,
                                (tmp.path / "export").string())) == 0);
    CHECK(read_file(tmp.path / "export" / "report.json") == from_cli);
    CHECK(nlohmann::json::parse(read_file(tmp.path / "export" / "session.json")).at("id") == id);
}

TEST_CASE("CLI failures exit nonzero", "[service][cli]") {
    TempDir tmp("clifail");
    std::ofstream(tmp.path / "bad_spec.json") << R"({"strategy": "TPS", "target_power": 5000})";
    CHECK(run_cli(fmt::format("--data-dir {} design --spec {} --out {}", (tmp.path / "data").string(),
                              (tmp.path / "bad_spec.json").string(), (tmp.path / "out").string())) != 0);
    CHECK(run_cli(fmt::format("--data-dir {} export --session {}", (tmp.path / "data").string(),
                              std::string(32, 'c'))) != 0);
    CHECK(run_cli("train --seed 1") != 0);
    CHECK(run_cli("") != 0);

    // A holdout manifest without samples.
    const physics::SamplingGrid grid(100e3, 128);
    surrogate::TrainingSet one;
    one.grid = grid;
    one.samples.push_back({surrogate::OperatingPoint{physics::ModulationParams::sps(0.125), 200.0, 160.0},
                           physics::solve_steady_state(physics::fixture_converter(),
                                                       physics::ModulationParams::sps(0.125), grid)});
    surrogate::save_training_set(tmp.path / "holdout", one);
    auto manifest = nlohmann::json::parse(read_file(tmp.path / "holdout" / "manifest.json"));
    manifest["samples"] = nlohmann::json::array();
    fs::create_directories(tmp.path / "empty");
    std::ofstream(tmp.path / "empty" / "manifest.json") << manifest.dump();
    const auto pair = surrogate::SurrogatePair{
        nn::init_network(surrogate::kModNetInputs, {4}, surrogate::kModNetOutputs, 1),
        nn::init_network(surrogate::kCirNetInputs, {4}, surrogate::kCirNetOutputs, 2),
        surrogate::Normalization::for_converter(physics::fixture_converter(), grid), grid, nlohmann::json::object()};
    surrogate::save_pair(tmp.path / "pair.json", pair);
    CHECK(run_cli(fmt::format("eval --pair {} --holdout {}", (tmp.path / "pair.json").string(),
                              (tmp.path / "empty" / "manifest.json").string())) != 0);
    CHECK(run_cli(fmt::format("eval --pair {} --holdout {}", (tmp.path / "pair.json").string(),
                              (tmp.path / "holdout").string())) == 0);
}

TEST_CASE("CLI training with the physics loss beats the data-only baseline", "[service][cli][slow]") {
    TempDir tmp("train");
    const std::string phys = (tmp.path / "phys").string();
    const std::string data = (tmp.path / "data_only").string();
    REQUIRE(run_cli(fmt::format("train --data-size 10 --seed 7 --out {}", phys)) == 0);
    REQUIRE(run_cli(fmt::format("train --data-size 10 --seed 7 --no-physics --out {}", data)) == 0);
    const auto a = nlohmann::json::parse(read_file(fs::path(phys) / "eval.json"));
    const auto b = nlohmann::json::parse(read_file(fs::path(data) / "eval.json"));
    CHECK(a.at("mae_i_l").get<double>() < b.at("mae_i_l").get<double>());
    CHECK(fs::exists(fs::path(phys) / "pair.json"));
    CHECK(run_cli(fmt::format("eval --pair {}/pair.json --holdout {}/holdout/manifest.json", phys, phys)) == 0);
}
