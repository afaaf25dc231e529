// Command-line front end: interactive chat, headless design, surrogate
// training and evaluation, session export and the HTTP service.

#include "dabmod/dialogue.hpp"
#include "dabmod/errors.hpp"
#include "dabmod/physics_io.hpp"
#include "dabmod/service.hpp"
#include "dabmod/surrogate.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>
#include <httplib.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace dabmod;

namespace {

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(fmt::format("{} is not valid JSON: {}", path.string(), e.what()));
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
    out << j.dump(2) << '\n';
}

/// Config file if given, then environment overrides, then command-line overrides.
service::ApiConfig make_config(const std::string& config_path, const std::string& data_dir) {
    service::ApiConfig cfg = config_path.empty() ? service::ApiConfig{} : service::load_config(config_path);
    cfg.apply_environment();
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    return cfg;
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
    if (g_server != nullptr) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DAB modulation design assistant"};
    app.require_subcommand(1);
    std::string config_path;
    std::string data_dir;
    app.add_option("--config", config_path, "service configuration JSON")->check(CLI::ExistingFile);
    app.add_option("--data-dir", data_dir, "session and artifact directory (overrides config and environment)");

    // chat
    auto* chat = app.add_subcommand("chat", "run the design dialogue in the terminal");
    std::string chat_fixture;
    chat->add_option("--fixture", chat_fixture, "converter fixture name");

    // design
    auto* design = app.add_subcommand("design", "run one design headlessly from a specification file");
    std::string spec_path;
    std::string design_out = "design-out";
    design->add_option("--spec", spec_path, "DesignSpec JSON (optionally {\"spec\": ..., \"fixture\": ...})")
        ->required()
        ->check(CLI::ExistingFile);
    design->add_option("--out", design_out, "output directory for report.json and the CSV artifacts");

    // train
    auto* train = app.add_subcommand("train", "train a surrogate pair and evaluate it on a fixed holdout");
    service::TrainingJob job;
    bool no_physics = false;
    std::string train_out;
    train->add_option("--data-size", job.data_size, "number of labelled operating points")->required();
    train->add_option("--seed", job.seed, "training seed")->required();
    train->add_flag("--no-physics", no_physics, "train CirNet without the physics loss");
    train->add_option("--epochs", job.epochs, "training epochs");
    train->add_option("--holdout-size", job.holdout_size, "number of holdout operating points");
    bool full_range = false;
    train->add_flag("--full-range", full_range, "sample d0 over [0, 0.5] and d1, d2 over [0.1, 1] (design use)");
    train->add_option("--out", train_out, "output directory (default train-<seed>[-nophys])");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a surrogate checkpoint on a holdout set");
    std::string pair_path;
    std::string holdout_path;
    eval->add_option("--pair", pair_path, "SurrogatePair checkpoint JSON")->required()->check(CLI::ExistingFile);
    eval->add_option("--holdout", holdout_path, "holdout manifest.json or its directory")->required();

    // export
    auto* exp = app.add_subcommand("export", "copy a session record and its artifacts");
    std::string session_id;
    std::string export_out;
    exp->add_option("--session", session_id, "session id")->required();
    exp->add_option("--out", export_out, "destination directory (default export-<id>)");

    // serve
    auto* serve = app.add_subcommand("serve", "run the HTTP service");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*chat) {
            service::Service svc(make_config(config_path, data_dir));
            nlohmann::json body = nlohmann::json::object();
            if (!chat_fixture.empty()) body["fixture"] = chat_fixture;
            const auto created = svc.create_session(body);
            if (created.status != 201) throw ValidationError(created.body.value("message", "cannot create session"));
            const std::string id = created.body.at("id");
            fmt::print("session {}\n\n{}\n\n> ", id, created.body.at("reply").get<std::string>());
            std::fflush(stdout);
            std::string line;
            while (std::getline(std::cin, line)) {
                const auto r = svc.post_message(id, {{"text", line}});
                if (r.status != 200) {
                    fmt::print(stderr, "error: {}\n", r.body.value("message", "request failed"));
                    return 1;
                }
                fmt::print("\n{}\n", r.body.at("reply").get<std::string>());
                if (r.body.at("phase") == "Done") {
                    fmt::print("\nArtifacts are in {}\n", svc.store().artifacts_dir(id).string());
                    return 0;
                }
                fmt::print("\n> ");
                std::fflush(stdout);
            }
            return 0;
        }

        if (*design) {
            const service::ApiConfig cfg = make_config(config_path, data_dir);
            const nlohmann::json doc = read_json(spec_path);
            const nlohmann::json spec_json = doc.contains("spec") ? doc.at("spec") : doc;
            const std::string fixture = doc.value("fixture", cfg.default_fixture);
            const auto it = cfg.fixtures.find(fixture);
            if (it == cfg.fixtures.end()) throw ValidationError(fmt::format("unknown fixture '{}'", fixture));
            const auto spec = spec_json.get<dialogue::DesignSpec>();
            const auto grounding = dialogue::GroundingContext::for_converter(it->second);
            const auto report = dialogue::run_design(spec, it->second, service::resolve_engines(cfg), grounding);
            dialogue::write_report_artifacts(design_out, report);
            for (const auto& s : report.analysis) fmt::print("{}:\n{}\n\n", s.title, s.text);
            fmt::print("Artifacts written to {}\n", fs::path(design_out).string());
            return 0;
        }

        if (*train) {
            job.physics = !no_physics;
            if (full_range) job.ranges = surrogate::ModulationRanges{0.0, 0.5, 0.1, 1.0};
            const service::ApiConfig cfg = make_config(config_path, data_dir);
            const auto& cp = cfg.fixtures.at(cfg.default_fixture);
            if (train_out.empty()) train_out = fmt::format("train-{}{}", job.seed, job.physics ? "" : "-nophys");
            const fs::path out(train_out);
            const auto outcome = service::run_training_job(cp, job);
            fs::create_directories(out);
            surrogate::save_pair(out / "pair.json", outcome.pair);
            surrogate::save_training_set(out / "holdout", outcome.holdout);
            write_json(out / "eval.json", outcome.report);
            fmt::print("{}", service::format_eval_table(outcome.report));
            fmt::print("Checkpoint {}, holdout {}, report {}\n", (out / "pair.json").string(),
                       (out / "holdout" / "manifest.json").string(), (out / "eval.json").string());
            return 0;
        }

        if (*eval) {
            const service::ApiConfig cfg = make_config(config_path, data_dir);
            const auto& cp = cfg.fixtures.at(cfg.default_fixture);
            fs::path dir(holdout_path);
            if (dir.filename() == "manifest.json") dir = dir.parent_path();
            const auto holdout = surrogate::load_training_set(dir);
            holdout.validate();
            const auto pair = surrogate::load_pair(pair_path);
            fmt::print("{}", service::format_eval_table(surrogate::evaluate(pair, cp, holdout)));
            return 0;
        }

        if (*exp) {
            const service::ApiConfig cfg = make_config(config_path, data_dir);
            const service::SessionStore store(cfg.data_dir);
            const auto record = store.load(session_id);
            if (!record) throw ValidationError(fmt::format("no session '{}' in {}", session_id, cfg.data_dir.string()));
            const fs::path out = export_out.empty() ? fs::path("export-" + session_id) : fs::path(export_out);
            fs::create_directories(out);
            write_json(out / "session.json", *record);
            const fs::path artifacts = store.artifacts_dir(session_id);
            std::size_t copied = 0;
            if (fs::is_directory(artifacts)) {
                for (const auto& e : fs::directory_iterator(artifacts)) {
                    fs::copy_file(e.path(), out / e.path().filename(), fs::copy_options::overwrite_existing);
                    ++copied;
                }
            }
            fmt::print("Exported session.json and {} artifacts to {}\n", copied, out.string());
            return 0;
        }

        if (*serve) {
            service::Service svc(make_config(config_path, data_dir));
            httplib::Server server;
            service::mount_routes(server, svc);
            g_server = &server;
            std::signal(SIGINT, stop_server);
            std::signal(SIGTERM, stop_server);
            const auto& cfg = svc.config();
            fmt::print("listening on http://{}:{} (data in {})\n", cfg.listen_host, cfg.port, cfg.data_dir.string());
            std::fflush(stdout);
            if (!server.listen(cfg.listen_host, cfg.port)) {
                fmt::print(stderr, "error: cannot listen on {}:{}\n", cfg.listen_host, cfg.port);
                return 1;
            }
            return 0;
        }
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 0;
}
