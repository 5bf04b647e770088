#pragma once

#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynens/runtime.hpp"

namespace dynens {

/// b uniform points in [lb, ub].
Batch uniform_points(const std::vector<double>& lb, const std::vector<double>& ub, std::size_t b,
                     std::mt19937_64& rng);

/// GPU count for a point whose first coordinate is x0: the range [lb0, ub0)
/// is cut into max_gpus equal buckets and bucket k asks for k+1 GPUs. x0 at
/// or beyond ub0 is clamped to max_gpus.
int gpus_for(double x0, double lb0, double ub0, int max_gpus);

double euclidean_norm(std::span<const double> x);

/// Knobs of the stub-application simulator, read from sim user parameters.
struct StubParams {
    std::string app_name = "forces";
    int particles = 100;
    /// Added to particles per unit of |x0|.
    double particles_per_x = 0.0;
    int steps = 10;
    double sleep = 0.0;
    /// Points with x0 above `slow_above` sleep `slow_sleep` seconds instead.
    std::optional<double> slow_above;
    double slow_sleep = 0.0;
    std::optional<double> timeout;
    double poll_interval = 0.5;
    double kill_grace = 2.0;
    bool dry_run = false;
    bool bypass_runner = false;
    std::optional<std::string> extra_args;

    static StubParams from_json(const nlohmann::json& user);
    /// Application arguments for a point: "particles steps [sleep]".
    std::string app_args(const Point& p) const;
};

/// Last whitespace-separated value of a stat file; nullopt when the file is
/// missing or holds no number.
std::optional<double> read_final_value(const std::filesystem::path& stat_file);

/// Bundled generators: gen_random_batch, gen_with_gpu_counts, gp_online.
const std::map<std::string, UserFn>& generator_registry();
/// Bundled simulators: sim_norm, sim_synthetic, sim_sleep, sim_stub_app.
const std::map<std::string, UserFn>& simulator_registry();
/// give_sim_work_first, only_persistent_gens.
const std::map<std::string, AllocFn>& allocator_registry();

/// Checks a bundled function's user parameters without running it; throws
/// std::invalid_argument naming the offending key.
void check_user_params(const std::string& fn_name, const nlohmann::json& user);

/// Generators that only run as persistent functions.
bool requires_persistent(const std::string& gen_name);

template <class Map>
std::string registry_names(const Map& m) {
    std::string out;
    for (const auto& [name, fn] : m) out += (out.empty() ? "" : ", ") + name;
    return out;
}

}  // namespace dynens
