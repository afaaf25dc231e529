#pragma once

// =============================================================================
// Design service
// =============================================================================
// Sessions are stored as one JSON document each under <data>/sessions, with
// design artifacts under <data>/artifacts/<id>. Every write goes to a
// temporary file that is renamed into place, so a crash never leaves a
// half-written record behind.
//
// Service turns requests into (status, JSON body) pairs; mount_routes binds
// it to an HTTP server:
//
//   GET    /fixtures
//   POST   /sessions                       {"fixture": name}  (body optional)
//   GET    /sessions
//   GET    /sessions/{id}
//   DELETE /sessions/{id}
//   POST   /sessions/{id}/messages         {"text": "..."}
//   GET    /sessions/{id}/report
//   GET    /sessions/{id}/artifacts/{name}
// =============================================================================

#include "dabmod/dialogue.hpp"
#include "dabmod/surrogate.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <unordered_map>
#include <vector>

namespace httplib {
class Server;
}

namespace dabmod::service {

using dialogue::DialogueState;
using physics::ConverterParams;

// =============================================================================
// Configuration
// =============================================================================

struct ApiConfig {
    std::string listen_host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path data_dir = "dabmod-data";
    dialogue::LlmClientConfig llm;
    /// Named converters; sessions pick one at creation.
    std::map<std::string, ConverterParams> fixtures{{"fixture", physics::fixture_converter()}};
    std::string default_fixture = "fixture";
    std::size_t max_concurrent_designs = 2;
    dialogue::Engines engines;                    ///< `pair` is filled from pair_path
    std::optional<std::filesystem::path> pair_path;  ///< surrogate checkpoint; oracle search when absent

    /// Throws ValidationError; also checks that data_dir can be created and written.
    void validate() const;

    /// Applies DABMOD_LISTEN (host:port), DABMOD_DATA_DIR, DABMOD_LLM_ENDPOINT,
    /// DABMOD_LLM_MODEL and DABMOD_PAIR when set. The LLM key is read at
    /// request time from the variable named by llm.api_key_env.
    void apply_environment();
};

/// Reads an ApiConfig JSON file; missing keys keep their defaults.
[[nodiscard]] ApiConfig load_config(const std::filesystem::path& path);

/// Engines with the surrogate checkpoint loaded when configured.
[[nodiscard]] dialogue::Engines resolve_engines(const ApiConfig& cfg);

// =============================================================================
// Session store
// =============================================================================

struct SessionRecord {
    std::string id;
    DialogueState state;
    std::int64_t created_ms = 0;
    std::int64_t updated_ms = 0;
    std::string fixture;
    std::filesystem::path artifacts_dir;
};

/// 32 lower-case hex digits.
[[nodiscard]] bool valid_session_id(std::string_view id);

class SessionStore {
public:
    explicit SessionStore(std::filesystem::path root);

    /// Write-then-rename; throws std::runtime_error or filesystem_error on failure.
    void save(const SessionRecord& record) const;
    [[nodiscard]] std::optional<SessionRecord> load(const std::string& id) const;
    [[nodiscard]] bool exists(const std::string& id) const;
    /// Sorted ids of all stored sessions.
    [[nodiscard]] std::vector<std::string> ids() const;
    /// Removes the record and its artifacts; false if there was no record.
    bool remove(const std::string& id) const;

    [[nodiscard]] std::filesystem::path record_path(const std::string& id) const;
    [[nodiscard]] std::filesystem::path artifacts_dir(const std::string& id) const;
    [[nodiscard]] const std::filesystem::path& root() const { return root_; }

    /// Test hook called with the temporary file just before it is renamed
    /// over the record; throwing from it simulates a crash mid-write.
    std::function<void(const std::filesystem::path&)> before_rename;

private:
    std::filesystem::path root_;
};

// =============================================================================
// Service
// =============================================================================

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

class Service {
public:
    explicit Service(ApiConfig cfg);

    [[nodiscard]] ApiResponse fixtures() const;
    [[nodiscard]] ApiResponse create_session(const nlohmann::json& body);
    [[nodiscard]] ApiResponse list_sessions() const;
    [[nodiscard]] ApiResponse get_session(const std::string& id) const;
    [[nodiscard]] ApiResponse delete_session(const std::string& id);
    /// Advances the dialogue by one user turn. Returns 429 while another
    /// message for the same session is in flight and 409 once it is Done.
    [[nodiscard]] ApiResponse post_message(const std::string& id, const nlohmann::json& body);
    /// The stored report.json document.
    [[nodiscard]] ApiResponse get_report(const std::string& id) const;
    /// Path of a stored artifact, or nullopt for unknown sessions or names.
    [[nodiscard]] std::optional<std::filesystem::path> artifact_path(const std::string& id,
                                                                     const std::string& name) const;

    [[nodiscard]] const ApiConfig& config() const { return cfg_; }
    [[nodiscard]] const dialogue::Engines& engines() const { return engines_; }
    [[nodiscard]] SessionStore& store() { return store_; }
    [[nodiscard]] dialogue::Dependencies dependencies_for(const std::string& fixture) const;

    /// Epoch milliseconds for timestamps; system clock when empty.
    std::function<std::int64_t()> clock;
    /// Test hook run while the session lock is held, before the dialogue advances.
    std::function<void(const std::string&)> on_message;

private:
    std::shared_ptr<std::mutex> session_mutex(const std::string& id);
    [[nodiscard]] std::int64_t now_ms() const;

    ApiConfig cfg_;
    dialogue::Engines engines_;
    SessionStore store_;
    std::unique_ptr<dialogue::LlmClient> llm_;
    std::counting_semaphore<1024> design_slots_;
    std::mutex map_mutex_;
    std::unordered_map<std::string, std::shared_ptr<std::mutex>> session_mutexes_;
};

/// Registers the routes listed at the top of this header.
void mount_routes(httplib::Server& server, Service& service);

// =============================================================================
// Training jobs
// =============================================================================

/// Surrogate training with a small labelled set and a fixed holdout, as used
/// by the `train` command.
struct TrainingJob {
    std::size_t data_size = 10;
    std::uint64_t seed = 0;
    bool physics = true;  ///< false trains CirNet with lambda_phys = 0
    std::size_t epochs = 300;
    double learning_rate = 1e-2;
    std::vector<std::size_t> hidden{16, 16};
    std::size_t samples_per_period = 128;
    std::size_t holdout_size = 10;
    std::uint64_t holdout_seed = 1000;
    /// Modulation ratios drawn for training, collocation and holdout points.
    surrogate::ModulationRanges ranges;

    void validate() const;
};

struct TrainingOutcome {
    surrogate::SurrogatePair pair;
    surrogate::TrainingSet holdout;
    surrogate::EvalReport report;
};

/// Training points are drawn with seed 100 + job.seed so they never coincide
/// with the holdout draw.
[[nodiscard]] TrainingOutcome run_training_job(const ConverterParams& cp, const TrainingJob& job);

/// Per-point MAE table followed by the means.
[[nodiscard]] std::string format_eval_table(const surrogate::EvalReport& report);

void to_json(nlohmann::json& j, const ApiConfig& c);
void from_json(const nlohmann::json& j, ApiConfig& c);
void to_json(nlohmann::json& j, const SessionRecord& r);
void from_json(const nlohmann::json& j, SessionRecord& r);
void to_json(nlohmann::json& j, const TrainingJob& t);

}  // namespace dabmod::service
