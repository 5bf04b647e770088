#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynens/app/config.hpp"
#include "dynens/app/functions.hpp"

using namespace dynens;
using nlohmann::json;

namespace {

struct RunFlags {
    std::string config;
    std::optional<int> nworkers;
    std::optional<std::string> comms;
    std::optional<std::string> platform;
    std::optional<std::string> inventory;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> ensemble_dir;
    std::optional<std::string> resume;
    std::vector<std::string> apps;
    bool dry_run = false;
};

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", path + ": " + e.what());
    }
}

// Command-line flags are folded into the document so they go through the
// same validation as the file.
EnsembleConfig config_with_flags(const RunFlags& f) {
    json j = read_json(f.config);
    if (f.nworkers) j["nworkers"] = *f.nworkers;
    if (f.comms) j["comms"] = *f.comms;
    if (f.seed) j["seed"] = *f.seed;
    if (f.ensemble_dir) j["ensemble_dir"] = *f.ensemble_dir;
    if (f.platform) j["platform"]["name"] = *f.platform;
    if (f.inventory) {
        if (*f.inventory == "none" || *f.inventory == "detected") {
            j["resources"]["inventory"] = *f.inventory;
        } else {
            j["resources"]["inventory"] = "file";
            j["resources"]["inventory_file"] = std::filesystem::absolute(*f.inventory).string();
        }
    }
    for (const auto& a : f.apps) {
        auto eq = a.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--app", "expected name=path, got '" + a + "'");
        j["apps"][a.substr(0, eq)] = std::filesystem::absolute(a.substr(eq + 1)).string();
    }
    if (f.dry_run) {
        if (!j.contains("sim_specs") || j["sim_specs"].value("sim_f", "") != "sim_stub_app")
            throw ConfigError("--dry-run", "only applies to sim_stub_app");
        j["sim_specs"]["user"]["dry_run"] = true;
    }
    std::filesystem::path base = std::filesystem::path(f.config).parent_path();
    return parse_config(j, base.empty() ? "." : base);
}

int cmd_run(const RunFlags& f) {
    EnsembleConfig cfg;
    try {
        cfg = config_with_flags(f);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    try {
        auto prep = prepare_run(cfg, capture_environment());
        std::optional<History> H0;
        if (f.resume) H0 = History::load(*f.resume);
        std::filesystem::create_directories(cfg.ensemble_dir);

        auto out = run_ensemble(prep.runtime, prep.gen, prep.sim, prep.alloc, std::move(H0));
        const auto& h = out.history;
        std::size_t nan = 0;
        for (const auto& r : h.records())
            if (r.returned && std::isnan(r.f)) ++nan;
        for (const auto& w : out.warnings) std::cerr << "warning: " << w << "\n";
        std::cout << "completed: " << to_string(out.flag) << "\n"
                  << "records: " << h.size() << " generated, " << h.given_count() << " given, " << h.returned_count()
                  << " returned, " << nan << " without a value\n"
                  << "elapsed: " << out.elapsed << " s";
        if (out.elapsed > 0) std::cout << " (" << h.returned_count() / out.elapsed << " sims/s)";
        std::cout << "\n";
        if (prep.runtime.dump_path) std::cout << "history: " << prep.runtime.dump_path->string() << "\n";
        if (cfg.gen.user.contains("metrics_path"))
            std::cout << "metrics: " << (cfg.ensemble_dir / cfg.gen.user["metrics_path"].get<std::string>()).string()
                      << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_validate(const std::string& path) {
    try {
        auto cfg = load_config(path);
        std::cout << "ok: " << cfg.gen.gen_f << " -> " << cfg.sim.sim_f << " (" << cfg.alloc_f << "), "
                  << cfg.nworkers << " workers, " << to_string(cfg.comms) << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_replay(const std::string& path) {
    try {
        const auto h = History::load(path);
        std::size_t cancelled = 0, killed = 0, valued = 0;
        double best = std::numeric_limits<double>::infinity(), sum = 0.0, span = 0.0;
        std::optional<SimId> best_id;
        for (const auto& r : h.records()) {
            cancelled += r.cancel_requested;
            killed += r.kill_sent;
            if (r.returned_time) span = std::max(span, *r.returned_time);
            if (!r.returned || std::isnan(r.f)) continue;
            ++valued;
            sum += r.f;
            if (r.f < best) {
                best = r.f;
                best_id = r.sim_id;
            }
        }
        std::cout << "records: " << h.size() << "\n"
                  << "given: " << h.given_count() << "\n"
                  << "returned: " << h.returned_count() << "\n"
                  << "with value: " << valued << "\n"
                  << "cancel requested: " << cancelled << "\n"
                  << "kill sent: " << killed << "\n";
        if (best_id) {
            std::cout << "mean f: " << sum / static_cast<double>(valued) << "\n"
                      << "min f: " << best << " (sim " << *best_id << ")\n";
        }
        std::cout << "span: " << span << " s";
        if (span > 0) std::cout << " (" << h.returned_count() / span << " sims/s)";
        std::cout << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic ensembles of generators and simulators"};
    app.require_subcommand(1);

    RunFlags rf;
    auto* run = app.add_subcommand("run", "Run an ensemble from a config file");
    run->add_option("config", rf.config, "Config file")->required()->check(CLI::ExistingFile);
    run->add_option("--nworkers", rf.nworkers, "Number of simulation workers")->check(CLI::PositiveNumber);
    run->add_option("--comms", rf.comms, "local or gen_on_manager");
    run->add_option("--platform", rf.platform, "Known platform name");
    run->add_option("--inventory", rf.inventory, "none, detected, or an inventory file");
    run->add_option("--seed", rf.seed, "Base random seed");
    run->add_option("--ensemble-dir", rf.ensemble_dir, "Directory for outputs and simulation directories");
    run->add_option("--resume", rf.resume, "Continue from a history dump")->check(CLI::ExistingFile);
    run->add_option("--app", rf.apps, "Register an application as name=path");
    run->add_flag("--dry-run", rf.dry_run, "Print launch lines instead of starting applications");

    std::string validate_path;
    auto* validate = app.add_subcommand("validate", "Check a config file");
    validate->add_option("config", validate_path, "Config file")->required();

    std::string replay_path;
    auto* replay = app.add_subcommand("replay-metrics", "Summarise a history dump");
    replay->add_option("history", replay_path, "History file")->required();

    CLI11_PARSE(app, argc, argv);
    if (*run) return cmd_run(rf);
    if (*validate) return cmd_validate(validate_path);
    if (*replay) return cmd_replay(replay_path);
    return 1;
}
