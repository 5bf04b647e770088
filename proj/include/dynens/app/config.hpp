#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynens/runtime.hpp"

namespace dynens {

/// A rejected configuration; field() is the dotted path of the culprit.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

enum class InventorySource { none, detected, file };

struct SimSpecs {
    std::string sim_f;
    std::vector<std::string> inputs{"x"};
    std::vector<std::string> outputs{"f"};
    nlohmann::json user = nlohmann::json::object();
};

struct GenSpecs {
    std::string gen_f;
    bool persis = false;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs{"x"};
    nlohmann::json user = nlohmann::json::object();
};

struct EnsembleConfig {
    static constexpr int kSchemaVersion = 1;

    int nworkers = 4;
    CommsMode comms = CommsMode::local;
    std::uint64_t seed = 0;
    std::filesystem::path ensemble_dir = "ensemble";
    ExitCriteria exit;

    std::optional<std::string> platform_name;
    PlatformOverrides platform_overrides;

    InventorySource inventory = InventorySource::none;
    std::optional<std::filesystem::path> inventory_file;
    ScheduleOptions schedule;
    ResourceSetOptions rset_options;

    /// Application name to absolute path.
    std::map<std::string, std::filesystem::path> apps;

    SimSpecs sim;
    GenSpecs gen;
    std::string alloc_f;
    bool async_return = false;

    /// Relative paths live under ensemble_dir.
    std::filesystem::path dump_path = "history.tsv";
    std::size_t dump_every = 50;
    bool abort_on_exception = true;
    bool kill_canceled_sims = true;
    double shutdown_timeout = 30.0;

    /// Length of x, from the generator's lb.
    std::size_t dim() const;
};

/// Validates `j`. Relative app and inventory paths resolve against `base_dir`.
EnsembleConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
EnsembleConfig load_config(const std::filesystem::path& path);

/// Everything run_ensemble needs.
struct PreparedRun {
    RuntimeConfig runtime;
    UserFn gen;
    UserFn sim;
    AllocFn alloc;
};

/// Resolves the platform and inventory against the environment snapshot and
/// looks up the named functions.
PreparedRun prepare_run(const EnsembleConfig& config, const EnvSnapshot& env);

}  // namespace dynens
