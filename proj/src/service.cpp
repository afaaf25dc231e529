#include "dabmod/service.hpp"

#include "dabmod/errors.hpp"
#include "dabmod/physics_io.hpp"

#include <fmt/core.h>
#include <fmt/format.h>
#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>

namespace dabmod::service {

namespace fs = std::filesystem;
using dialogue::DialogueFinishedError;
using dialogue::Phase;

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw ValidationError(message);
}

std::int64_t system_clock_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ApiResponse error_response(int status, std::string_view code, const std::string& message) {
    return {status, {{"error", code}, {"message", message}}};
}

ApiResponse not_found(const std::string& id) {
    return error_response(404, "not_found", fmt::format("no session '{}'", id));
}

const nlohmann::json kMessageSchema = {
    {"type", "object"},
    {"required", {"text"}},
    {"properties", {{"text", {{"type", "string"}, {"description", "the engineer's message"}}}}},
};

const nlohmann::json kCreateSchema = {
    {"type", "object"},
    {"properties", {{"fixture", {{"type", "string"}, {"description", "converter fixture name; see GET /fixtures"}}}}},
};

ApiResponse bad_request(const std::string& message, const nlohmann::json& schema) {
    ApiResponse r = error_response(400, "bad_request", message);
    r.body["schema"] = schema;
    return r;
}

std::string new_session_id() {
    static std::mutex mutex;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(mutex);
    return fmt::format("{:016x}{:016x}", rng(), rng());
}

nlohmann::json session_summary(const SessionRecord& r) {
    return {{"id", r.id},
            {"phase", dialogue::to_string(r.state.phase)},
            {"fixture", r.fixture},
            {"created_ms", r.created_ms},
            {"updated_ms", r.updated_ms}};
}

nlohmann::json report_reference(const std::string& id, const std::vector<std::string>& files) {
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& f : files) {
        artifacts.push_back({{"name", f}, {"href", fmt::format("/sessions/{}/artifacts/{}", id, f)}});
    }
    return {{"href", fmt::format("/sessions/{}/report", id)}, {"artifacts", artifacts}};
}

std::vector<std::string> stored_artifacts(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && e.path().extension() != ".tmp") out.push_back(name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

// =============================================================================
// Configuration
// =============================================================================

void ApiConfig::validate() const {
    require(!listen_host.empty(), "listen host must not be empty");
    require(port >= 0 && port <= 65535, fmt::format("port {} outside [0, 65535]", port));
    require(!fixtures.empty(), "at least one converter fixture is required");
    require(fixtures.count(default_fixture) == 1,
            fmt::format("default fixture '{}' is not in the fixture registry", default_fixture));
    for (const auto& [name, cp] : fixtures) {
        require(!name.empty(), "fixture names must not be empty");
        cp.validate();
    }
    require(max_concurrent_designs >= 1 && max_concurrent_designs <= 1024,
            "max_concurrent_designs must lie in [1, 1024]");
    llm.validate();
    engines.validate();
    if (pair_path) require(fs::exists(*pair_path), fmt::format("surrogate checkpoint {} not found", pair_path->string()));

    std::error_code ec;
    fs::create_directories(data_dir, ec);
    require(!ec && fs::is_directory(data_dir), fmt::format("data directory {} cannot be created", data_dir.string()));
    const fs::path probe = data_dir / ".write-probe";
    {
        std::ofstream out(probe);
        require(static_cast<bool>(out << "ok"), fmt::format("data directory {} is not writable", data_dir.string()));
    }
    fs::remove(probe, ec);
}

void ApiConfig::apply_environment() {
    if (const char* v = std::getenv("DABMOD_LISTEN"); v != nullptr && *v != '\0') {
        const std::string s(v);
        const std::size_t colon = s.rfind(':');
        require(colon != std::string::npos && colon > 0, fmt::format("DABMOD_LISTEN '{}' must be host:port", s));
        listen_host = s.substr(0, colon);
        try {
            port = std::stoi(s.substr(colon + 1));
        } catch (const std::exception&) {
            throw ValidationError(fmt::format("DABMOD_LISTEN '{}' has no valid port", s));
        }
    }
    if (const char* v = std::getenv("DABMOD_DATA_DIR"); v != nullptr && *v != '\0') data_dir = v;
    if (const char* v = std::getenv("DABMOD_LLM_ENDPOINT"); v != nullptr && *v != '\0') {
        llm.endpoint = v;
        llm.enabled = true;
    }
    if (const char* v = std::getenv("DABMOD_LLM_MODEL"); v != nullptr && *v != '\0') llm.model = v;
    if (const char* v = std::getenv("DABMOD_PAIR"); v != nullptr && *v != '\0') pair_path = fs::path(v);
}

ApiConfig load_config(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text(path)).get<ApiConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(fmt::format("invalid config {}: {}", path.string(), e.what()));
    }
}

dialogue::Engines resolve_engines(const ApiConfig& cfg) {
    dialogue::Engines e = cfg.engines;
    if (cfg.pair_path) {
        e.pair = std::make_shared<const surrogate::SurrogatePair>(surrogate::load_pair(*cfg.pair_path));
    }
    e.validate();
    return e;
}

// =============================================================================
// Session store
// =============================================================================

bool valid_session_id(std::string_view id) {
    return id.size() == 32 &&
           std::all_of(id.begin(), id.end(), [](char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); });
}

SessionStore::SessionStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_ / "sessions");
    fs::create_directories(root_ / "artifacts");
}

fs::path SessionStore::record_path(const std::string& id) const {
    return root_ / "sessions" / (id + ".json");
}

fs::path SessionStore::artifacts_dir(const std::string& id) const {
    return root_ / "artifacts" / id;
}

void SessionStore::save(const SessionRecord& record) const {
    require(valid_session_id(record.id), fmt::format("invalid session id '{}'", record.id));
    const fs::path path = record_path(record.id);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", tmp.string()));
        out << nlohmann::json(record).dump(2) << '\n';
        out.flush();
        if (!out) throw std::runtime_error(fmt::format("failed writing {}", tmp.string()));
    }
    if (before_rename) before_rename(tmp);
    fs::rename(tmp, path);
}

std::optional<SessionRecord> SessionStore::load(const std::string& id) const {
    if (!valid_session_id(id)) return std::nullopt;
    const fs::path path = record_path(id);
    if (!fs::exists(path)) return std::nullopt;
    return nlohmann::json::parse(read_text(path)).get<SessionRecord>();
}

bool SessionStore::exists(const std::string& id) const {
    return valid_session_id(id) && fs::exists(record_path(id));
}

std::vector<std::string> SessionStore::ids() const {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(root_ / "sessions")) {
        if (e.path().extension() != ".json") continue;
        const std::string id = e.path().stem().string();
        if (valid_session_id(id)) out.push_back(id);
    }
    std::sort(out.begin(), out.end());
    return out;
}

bool SessionStore::remove(const std::string& id) const {
    if (!exists(id)) return false;
    fs::remove(record_path(id));
    fs::remove_all(artifacts_dir(id));
    return true;
}

// =============================================================================
// Service
// =============================================================================

Service::Service(ApiConfig cfg)
    : cfg_(std::move(cfg)),
      engines_(resolve_engines(cfg_)),
      store_(cfg_.data_dir),
      design_slots_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(cfg_.max_concurrent_designs, 1, 1024))) {
    cfg_.validate();
    if (cfg_.llm.enabled) llm_ = std::make_unique<dialogue::HttpLlmClient>(cfg_.llm);
}

std::int64_t Service::now_ms() const {
    return clock ? clock() : system_clock_ms();
}

dialogue::Dependencies Service::dependencies_for(const std::string& fixture) const {
    const auto it = cfg_.fixtures.find(fixture);
    require(it != cfg_.fixtures.end(), fmt::format("unknown fixture '{}'", fixture));
    dialogue::Dependencies d = dialogue::Dependencies::for_converter(it->second);
    d.engines = engines_;
    d.llm = llm_.get();
    if (clock) d.clock = clock;
    return d;
}

std::shared_ptr<std::mutex> Service::session_mutex(const std::string& id) {
    std::lock_guard lock(map_mutex_);
    auto& m = session_mutexes_[id];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
}

ApiResponse Service::fixtures() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& [name, cp] : cfg_.fixtures) {
        list.push_back({{"name", name}, {"default", name == cfg_.default_fixture}, {"converter", cp}});
    }
    return {200, {{"fixtures", list}}};
}

ApiResponse Service::create_session(const nlohmann::json& body) {
    if (!body.is_null() && !body.is_object()) return bad_request("body must be a JSON object", kCreateSchema);
    std::string fixture = cfg_.default_fixture;
    if (body.is_object() && body.contains("fixture")) {
        if (!body["fixture"].is_string()) return bad_request("'fixture' must be a string", kCreateSchema);
        fixture = body["fixture"].get<std::string>();
        if (cfg_.fixtures.count(fixture) == 0) {
            return bad_request(fmt::format("unknown fixture '{}'", fixture), kCreateSchema);
        }
    }
    SessionRecord r;
    do {
        r.id = new_session_id();
    } while (store_.exists(r.id));
    r.created_ms = r.updated_ms = now_ms();
    r.fixture = fixture;
    r.artifacts_dir = store_.artifacts_dir(r.id);
    const auto deps = dependencies_for(fixture);
    r.state.transcript.push_back(
        {dialogue::Role::Assistant, dialogue::welcome_text(deps.grounding), r.created_ms, r.state.phase, nullptr});
    try {
        store_.save(r);
    } catch (const std::exception& e) {
        return error_response(500, "storage_error", e.what());
    }
    nlohmann::json out = session_summary(r);
    out["reply"] = r.state.transcript.back().text;
    return {201, out};
}

ApiResponse Service::list_sessions() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& id : store_.ids()) {
        if (const auto r = store_.load(id)) list.push_back(session_summary(*r));
    }
    return {200, {{"sessions", list}}};
}

ApiResponse Service::get_session(const std::string& id) const {
    const auto r = store_.load(id);
    if (!r) return not_found(id);
    return {200, *r};
}

ApiResponse Service::delete_session(const std::string& id) {
    const auto m = session_mutex(id);
    std::unique_lock lock(*m, std::try_to_lock);
    if (!lock.owns_lock()) return error_response(429, "busy", "a message for this session is in progress");
    if (!store_.remove(id)) return not_found(id);
    return {200, {{"id", id}, {"deleted", true}}};
}

ApiResponse Service::post_message(const std::string& id, const nlohmann::json& body) {
    if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
        return bad_request("expected a JSON object with a string field 'text'", kMessageSchema);
    }
    if (!store_.exists(id)) return not_found(id);
    const auto m = session_mutex(id);
    std::unique_lock lock(*m, std::try_to_lock);
    if (!lock.owns_lock()) return error_response(429, "busy", "a message for this session is in progress");

    auto record = store_.load(id);
    if (!record) return not_found(id);
    if (record->state.phase == Phase::Done) {
        return error_response(409, "conflict", "the dialogue is finished; create a new session");
    }
    if (on_message) on_message(id);

    const bool may_design = record->state.phase == Phase::CollectOptimizer || record->state.phase == Phase::Running;
    if (may_design) design_slots_.acquire();
    dialogue::AdvanceResult result;
    try {
        result = dialogue::advance(record->state, body["text"].get<std::string>(), dependencies_for(record->fixture));
    } catch (const DialogueFinishedError& e) {
        if (may_design) design_slots_.release();
        return error_response(409, "conflict", e.what());
    } catch (const std::exception& e) {
        if (may_design) design_slots_.release();
        return error_response(500, "internal_error", e.what());
    }
    if (may_design) design_slots_.release();

    const bool new_report = result.state.report.has_value() && !record->state.report.has_value();
    std::vector<std::string> files;
    try {
        if (new_report) files = dialogue::write_report_artifacts(record->artifacts_dir, *result.state.report);
        record->state = std::move(result.state);
        record->updated_ms = now_ms();
        store_.save(*record);
    } catch (const std::exception& e) {
        return error_response(500, "storage_error", e.what());
    }

    nlohmann::json out = session_summary(*record);
    out["reply"] = result.reply;
    out["spec"] = record->state.spec;
    out["degraded"] = record->state.degraded;
    out["last_error"] = record->state.last_error;
    out["report"] = nullptr;
    if (record->state.report) {
        if (files.empty()) files = stored_artifacts(record->artifacts_dir);
        out["report"] = report_reference(id, files);
    }
    return {200, out};
}

ApiResponse Service::get_report(const std::string& id) const {
    if (!store_.exists(id)) return not_found(id);
    const fs::path path = store_.artifacts_dir(id) / "report.json";
    if (!fs::exists(path)) return error_response(404, "no_report", "the design has not run yet");
    return {200, nlohmann::json::parse(read_text(path))};
}

std::optional<fs::path> Service::artifact_path(const std::string& id, const std::string& name) const {
    if (!store_.exists(id)) return std::nullopt;
    const auto files = stored_artifacts(store_.artifacts_dir(id));
    if (std::find(files.begin(), files.end(), name) == files.end()) return std::nullopt;
    return store_.artifacts_dir(id) / name;
}

// =============================================================================
// HTTP routes
// =============================================================================

namespace {

void send(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(2) + "\n", "application/json");
}

/// Parses the request body; an empty body is JSON null.
std::optional<nlohmann::json> parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json(nullptr);
    try {
        return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
}

}  // namespace

void mount_routes(httplib::Server& server, Service& service) {
    server.Get("/fixtures", [&](const httplib::Request&, httplib::Response& res) { send(res, service.fixtures()); });
    server.Post("/sessions", [&](const httplib::Request& req, httplib::Response& res) {
        const auto body = parse_body(req);
        send(res, body ? service.create_session(*body) : bad_request("body is not valid JSON", kCreateSchema));
    });
    server.Get("/sessions", [&](const httplib::Request&, httplib::Response& res) {
        send(res, service.list_sessions());
    });
    server.Get(R"(/sessions/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
        send(res, service.get_session(req.matches[1]));
    });
    server.Delete(R"(/sessions/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
        send(res, service.delete_session(req.matches[1]));
    });
    server.Post(R"(/sessions/([^/]+)/messages)", [&](const httplib::Request& req, httplib::Response& res) {
        const auto body = parse_body(req);
        send(res, body ? service.post_message(req.matches[1], *body)
                       : bad_request("body is not valid JSON", kMessageSchema));
    });
    server.Get(R"(/sessions/([^/]+)/report)", [&](const httplib::Request& req, httplib::Response& res) {
        send(res, service.get_report(req.matches[1]));
    });
    server.Get(R"(/sessions/([^/]+)/artifacts/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const std::string name = req.matches[2];
        const auto path = service.artifact_path(id, name);
        if (!path) {
            send(res, error_response(404, "not_found", fmt::format("no artifact '{}' for session '{}'", name, id)));
            return;
        }
        const bool csv = path->extension() == ".csv";
        res.set_content(read_text(*path), csv ? "text/csv" : "application/json");
    });
}

// =============================================================================
// Training jobs
// =============================================================================

void TrainingJob::validate() const {
    require(data_size >= 1, "data size must be >= 1");
    require(holdout_size >= 1, "holdout size must be >= 1");
    require(epochs >= 1, "epochs must be >= 1");
    require(learning_rate > 0.0, "learning rate must be positive");
    require(!hidden.empty(), "at least one hidden layer is required");
    ranges.validate();
}

TrainingOutcome run_training_job(const ConverterParams& cp, const TrainingJob& job) {
    job.validate();
    const physics::SamplingGrid grid(cp.f_s, job.samples_per_period);
    const auto env = surrogate::OperatingEnvelope::around(cp);
    TrainingOutcome out;
    out.holdout = surrogate::generate_dataset(
        cp, surrogate::sample_operating_points(cp, env, grid, job.holdout_size, job.holdout_seed,
                                                        physics::Strategy::TPS, job.ranges),
        grid);
    const auto train = surrogate::generate_dataset(
        cp, surrogate::sample_operating_points(cp, env, grid, job.data_size, 100 + job.seed,
                                                        physics::Strategy::TPS, job.ranges),
        grid);

    surrogate::TrainingConfig cfg;
    cfg.seed = job.seed;
    cfg.epochs = job.epochs;
    cfg.learning_rate = job.learning_rate;
    cfg.hidden = job.hidden;
    cfg.lambda_phys = job.physics ? 1.0 : 0.0;
    out.pair = surrogate::train_pair(train, cp, cfg, env, job.ranges);
    out.pair.metadata["job"] = job;
    out.report = surrogate::evaluate(out.pair, cp, out.holdout);
    return out;
}

std::string format_eval_table(const surrogate::EvalReport& report) {
    std::string out = fmt::format("{:>5} {:>8} {:>8} {:>8} {:>7} {:>7} {:>9} {:>9} {:>9} {:>9} {:>7}\n", "point", "d0",
                                  "d1", "d2", "v_in", "v_out", "mae_i[A]", "mae_v[V]", "ipp_pred", "ipp_ref", "ipp_err");
    for (std::size_t k = 0; k < report.points.size(); ++k) {
        const auto& p = report.points[k];
        const double err =
            p.i_pp_reference > 0.0 ? std::abs(p.i_pp_predicted - p.i_pp_reference) / p.i_pp_reference : 0.0;
        out += fmt::format("{:>5} {:>8.4f} {:>8.4f} {:>8.4f} {:>7.1f} {:>7.1f} {:>9.4f} {:>9.3f} {:>9.3f} {:>9.3f} "
                           "{:>6.2f}%\n",
                           k, p.op.mp.d0, p.op.mp.d1, p.op.mp.d2, p.op.v_in, p.op.v_out, p.mae_i_l, p.mae_v,
                           p.i_pp_predicted, p.i_pp_reference, 100.0 * err);
    }
    out += fmt::format("mean  mae_i_l = {:.4f} A, mae_v = {:.3f} V, residual_rms = {:.3f} V\n", report.mae_i_l,
                       report.mae_v, report.residual_rms);
    return out;
}

// =============================================================================
// Serialization
// =============================================================================

void to_json(nlohmann::json& j, const ApiConfig& c) {
    nlohmann::json fixtures = nlohmann::json::object();
    for (const auto& [name, cp] : c.fixtures) fixtures[name] = cp;
    j = {{"listen_host", c.listen_host},
         {"port", c.port},
         {"data_dir", c.data_dir.string()},
         {"llm", c.llm},
         {"fixtures", fixtures},
         {"default_fixture", c.default_fixture},
         {"max_concurrent_designs", c.max_concurrent_designs},
         {"engines", c.engines},
         {"pair_path", c.pair_path ? nlohmann::json(c.pair_path->string()) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, ApiConfig& c) {
    const ApiConfig d;
    c.listen_host = j.value("listen_host", d.listen_host);
    c.port = j.value("port", d.port);
    c.data_dir = j.value("data_dir", d.data_dir.string());
    c.llm = j.value("llm", d.llm);
    if (const auto it = j.find("fixtures"); it != j.end()) {
        c.fixtures.clear();
        for (const auto& [name, cp] : it->items()) c.fixtures[name] = cp.get<ConverterParams>();
    } else {
        c.fixtures = d.fixtures;
    }
    c.default_fixture = j.value("default_fixture", d.default_fixture);
    c.max_concurrent_designs = j.value("max_concurrent_designs", d.max_concurrent_designs);
    c.engines = j.value("engines", d.engines);
    c.pair_path.reset();
    if (const auto it = j.find("pair_path"); it != j.end() && !it->is_null()) c.pair_path = it->get<std::string>();
}

void to_json(nlohmann::json& j, const SessionRecord& r) {
    j = {{"id", r.id},
         {"state", r.state},
         {"created_ms", r.created_ms},
         {"updated_ms", r.updated_ms},
         {"fixture", r.fixture},
         {"artifacts_dir", r.artifacts_dir.string()}};
}

void from_json(const nlohmann::json& j, SessionRecord& r) {
    j.at("id").get_to(r.id);
    j.at("state").get_to(r.state);
    j.at("created_ms").get_to(r.created_ms);
    j.at("updated_ms").get_to(r.updated_ms);
    j.at("fixture").get_to(r.fixture);
    r.artifacts_dir = j.at("artifacts_dir").get<std::string>();
}

void to_json(nlohmann::json& j, const TrainingJob& t) {
    j = {{"data_size", t.data_size},
         {"seed", t.seed},
         {"physics", t.physics},
         {"epochs", t.epochs},
         {"learning_rate", t.learning_rate},
         {"hidden", t.hidden},
         {"samples_per_period", t.samples_per_period},
         {"holdout_size", t.holdout_size},
         {"holdout_seed", t.holdout_seed},
         {"ranges", {{"d0_min", t.ranges.d0_min}, {"d0_max", t.ranges.d0_max}, {"d_min", t.ranges.d_min}, {"d_max", t.ranges.d_max}}}};
}

}  // namespace dabmod::service
