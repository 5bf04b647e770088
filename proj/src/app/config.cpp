#include "dynens/app/config.hpp"

#include <fstream>
#include <set>

#include "dynens/app/functions.hpp"

namespace dynens {

using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Obj {
public:
    Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }
    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::optional<long long> integer(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = j_.at(key);
        if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
        return v.get<long long>();
    }
    std::optional<double> number(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
        return v.get<double>();
    }
    std::optional<bool> boolean(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = j_.at(key);
        if (!v.is_boolean()) throw ConfigError(field(key), "expected true or false");
        return v.get<bool>();
    }
    std::optional<std::string> string(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
        return v.get<std::string>();
    }
    std::optional<std::vector<std::string>> strings(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = j_.at(key);
        std::vector<std::string> out;
        if (!v.is_array()) throw ConfigError(field(key), "expected an array of strings");
        for (const auto& e : v) {
            if (!e.is_string()) throw ConfigError(field(key), "expected an array of strings");
            out.push_back(e.get<std::string>());
        }
        return out;
    }
    std::string required_string(const std::string& key) {
        auto s = string(key);
        if (!s) throw ConfigError(field(key), "required");
        return *s;
    }
    long long positive(const std::string& key, long long fallback) {
        auto v = integer(key).value_or(fallback);
        if (v < 1) throw ConfigError(field(key), "must be positive");
        return v;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(field(k), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() ? std::filesystem::absolute(base / path).lexically_normal() : path;
}

PlatformOverrides read_overrides(Obj& o) {
    PlatformOverrides ov;
    try {
        if (auto v = o.string("mpi_runner")) ov.mpi_runner = parse_mpi_runner(*v);
        if (auto v = o.string("gpu_setting_type")) ov.gpu_setting_type = parse_gpu_setting_type(*v);
    } catch (const PlatformError& e) {
        throw ConfigError(o.field("mpi_runner/gpu_setting_type"), e.what());
    }
    if (auto v = o.string("runner_name")) ov.runner_name = *v;
    if (auto v = o.integer("cores_per_node")) ov.cores_per_node = static_cast<int>(*v);
    if (auto v = o.integer("logical_cores_per_node")) ov.logical_cores_per_node = static_cast<int>(*v);
    if (auto v = o.integer("gpus_per_node")) ov.gpus_per_node = static_cast<int>(*v);
    if (auto v = o.integer("tiles_per_gpu")) ov.tiles_per_gpu = static_cast<int>(*v);
    if (auto v = o.string("gpu_setting_name")) ov.gpu_setting_name = *v;
    if (auto v = o.string("gpu_env_fallback")) ov.gpu_env_fallback = *v;
    if (auto v = o.boolean("scheduler_match_slots")) ov.scheduler_match_slots = *v;
    o.finish();
    return ov;
}

void check_fields(const std::string& field, const std::vector<std::string>& names,
                  const std::set<std::string>& allowed) {
    for (const auto& n : names)
        if (!allowed.count(n)) throw ConfigError(field, "unknown history field '" + n + "'");
}

}  // namespace

std::size_t EnsembleConfig::dim() const {
    if (!gen.user.contains("lb")) return 0;
    return gen.user.at("lb").size();
}

EnsembleConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
    Obj root(j, "");
    EnsembleConfig c;

    auto version = root.integer("schema_version");
    if (!version) throw ConfigError("schema_version", "required");
    if (*version != EnsembleConfig::kSchemaVersion)
        throw ConfigError("schema_version", "unsupported version " + std::to_string(*version) + " (expected " +
                                                std::to_string(EnsembleConfig::kSchemaVersion) + ")");
    root.string("description");

    c.nworkers = static_cast<int>(root.positive("nworkers", c.nworkers));
    if (auto v = root.string("comms")) {
        try {
            c.comms = parse_comms_mode(*v);
        } catch (const std::exception& e) {
            throw ConfigError("comms", e.what());
        }
    }
    if (auto v = root.integer("seed")) {
        if (*v < 0) throw ConfigError("seed", "must be non-negative");
        c.seed = static_cast<std::uint64_t>(*v);
    }
    if (auto v = root.string("ensemble_dir")) c.ensemble_dir = *v;

    if (!root.has("exit_criteria")) throw ConfigError("exit_criteria", "required");
    {
        Obj e(root.raw("exit_criteria"), "exit_criteria");
        if (e.has("sim_max")) c.exit.sim_max = static_cast<std::size_t>(e.positive("sim_max", 1));
        if (e.has("gen_max")) c.exit.gen_max = static_cast<std::size_t>(e.positive("gen_max", 1));
        if (auto v = e.number("wallclock_max")) {
            if (!(*v > 0)) throw ConfigError("exit_criteria.wallclock_max", "must be positive");
            c.exit.wallclock_max = *v;
        }
        if (e.has("stop_val")) {
            Obj s(e.raw("stop_val"), "exit_criteria.stop_val");
            StopValue sv;
            sv.field = s.string("field").value_or("f");
            if (sv.field != "f") throw ConfigError("exit_criteria.stop_val.field", "only f is supported");
            auto t = s.number("threshold");
            if (!t) throw ConfigError("exit_criteria.stop_val.threshold", "required");
            sv.threshold = *t;
            s.finish();
            c.exit.stop_val = sv;
        }
        e.finish();
        if (!c.exit.any()) throw ConfigError("exit_criteria", "needs at least one criterion");
    }

    if (root.has("platform")) {
        Obj p(root.raw("platform"), "platform");
        if (auto n = p.string("name")) {
            if (!known_platform(*n)) {
                std::string names;
                for (const auto& k : known_platform_names()) names += (names.empty() ? "" : ", ") + k;
                throw ConfigError("platform.name", "unknown platform '" + *n + "'; known: " + names);
            }
            c.platform_name = *n;
        }
        if (p.has("overrides")) {
            Obj o(p.raw("overrides"), "platform.overrides");
            c.platform_overrides = read_overrides(o);
        }
        p.finish();
    }

    if (root.has("resources")) {
        Obj r(root.raw("resources"), "resources");
        const auto src = r.string("inventory").value_or("none");
        if (src == "none") c.inventory = InventorySource::none;
        else if (src == "detected") c.inventory = InventorySource::detected;
        else if (src == "file") c.inventory = InventorySource::file;
        else throw ConfigError("resources.inventory", "expected none, detected or file, not '" + src + "'");
        if (auto f = r.string("inventory_file")) c.inventory_file = resolve(base_dir, *f);
        if (c.inventory == InventorySource::file && !c.inventory_file)
            throw ConfigError("resources.inventory_file", "required when inventory is file");
        if (auto v = r.boolean("split2fit")) c.schedule.split2fit = *v;
        if (auto v = r.boolean("match_slots")) c.schedule.match_slots = *v;
        if (auto v = r.boolean("use_tiles")) c.rset_options.use_tiles = *v;
        if (r.has("num_resource_sets"))
            c.rset_options.num_resource_sets = static_cast<int>(r.positive("num_resource_sets", 1));
        r.finish();
    }

    if (root.has("apps")) {
        const auto& a = root.raw("apps");
        if (!a.is_object()) throw ConfigError("apps", "expected an object of name: path");
        for (const auto& [name, path] : a.items()) {
            if (!path.is_string()) throw ConfigError("apps." + name, "expected a path");
            c.apps[name] = resolve(base_dir, path.get<std::string>());
        }
    }

    const std::set<std::string> point_fields{"x", "f", "priority", "num_procs", "num_gpus", "sim_id"};
    if (!root.has("sim_specs")) throw ConfigError("sim_specs", "required");
    {
        Obj s(root.raw("sim_specs"), "sim_specs");
        c.sim.sim_f = s.required_string("sim_f");
        if (!simulator_registry().count(c.sim.sim_f))
            throw ConfigError("sim_specs.sim_f", "unknown simulator '" + c.sim.sim_f +
                                                     "'; available: " + registry_names(simulator_registry()));
        if (auto v = s.strings("inputs")) c.sim.inputs = *v;
        if (auto v = s.strings("outputs")) c.sim.outputs = *v;
        check_fields("sim_specs.inputs", c.sim.inputs, point_fields);
        if (c.sim.outputs != std::vector<std::string>{"f"}) throw ConfigError("sim_specs.outputs", "must be [\"f\"]");
        if (s.has("user")) {
            c.sim.user = s.raw("user");
            if (!c.sim.user.is_object()) throw ConfigError("sim_specs.user", "expected an object");
        }
        s.finish();
    }

    if (!root.has("gen_specs")) throw ConfigError("gen_specs", "required");
    {
        Obj g(root.raw("gen_specs"), "gen_specs");
        c.gen.gen_f = g.required_string("gen_f");
        if (!generator_registry().count(c.gen.gen_f))
            throw ConfigError("gen_specs.gen_f", "unknown generator '" + c.gen.gen_f +
                                                     "'; available: " + registry_names(generator_registry()));
        c.gen.persis = g.boolean("persis").value_or(false);
        if (requires_persistent(c.gen.gen_f) && !c.gen.persis)
            throw ConfigError("gen_specs.persis", c.gen.gen_f + " must run persistent");
        if (auto v = g.strings("inputs")) c.gen.inputs = *v;
        if (auto v = g.strings("outputs")) c.gen.outputs = *v;
        check_fields("gen_specs.inputs", c.gen.inputs, point_fields);
        check_fields("gen_specs.outputs", c.gen.outputs, {"x", "priority", "num_procs", "num_gpus"});
        if (g.has("user")) c.gen.user = g.raw("user");
        if (!c.gen.user.is_object()) throw ConfigError("gen_specs.user", "expected an object");
        g.finish();
        try {
            check_user_params(c.gen.gen_f, c.gen.user);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("gen_specs.user", e.what());
        }
        try {
            check_user_params(c.sim.sim_f, c.sim.user);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("sim_specs.user", e.what());
        }
    }

    c.alloc_f = c.gen.persis ? "only_persistent_gens" : "give_sim_work_first";
    if (root.has("alloc_specs")) {
        Obj a(root.raw("alloc_specs"), "alloc_specs");
        if (auto v = a.string("alloc_f")) c.alloc_f = *v;
        if (!allocator_registry().count(c.alloc_f))
            throw ConfigError("alloc_specs.alloc_f", "unknown allocator '" + c.alloc_f +
                                                         "'; available: " + registry_names(allocator_registry()));
        if (a.has("user")) {
            Obj u(a.raw("user"), "alloc_specs.user");
            c.async_return = u.boolean("async_return").value_or(false);
            u.finish();
        }
        a.finish();
    }
    if (c.gen.persis != (c.alloc_f == "only_persistent_gens"))
        throw ConfigError("alloc_specs.alloc_f", c.gen.persis ? "a persistent generator needs only_persistent_gens"
                                                              : "only_persistent_gens needs gen_specs.persis");
    if (c.comms == CommsMode::gen_on_manager && !c.gen.persis)
        throw ConfigError("comms", "gen_on_manager needs a persistent generator");

    if (root.has("history")) {
        Obj h(root.raw("history"), "history");
        if (auto v = h.string("dump_path")) c.dump_path = *v;
        c.dump_every = static_cast<std::size_t>(h.positive("dump_every", static_cast<long long>(c.dump_every)));
        h.finish();
    }
    if (auto v = root.boolean("abort_on_exception")) c.abort_on_exception = *v;
    if (auto v = root.boolean("kill_canceled_sims")) c.kill_canceled_sims = *v;
    if (auto v = root.number("shutdown_timeout")) {
        if (!(*v > 0)) throw ConfigError("shutdown_timeout", "must be positive");
        c.shutdown_timeout = *v;
    }
    root.finish();
    return c;
}

EnsembleConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", path.string() + ": " + e.what());
    }
    return parse_config(j, path.parent_path().empty() ? "." : path.parent_path());
}

PreparedRun prepare_run(const EnsembleConfig& c, const EnvSnapshot& env) {
    PreparedRun p;
    auto& r = p.runtime;
    r.nworkers = c.nworkers;
    r.comms = c.comms;
    r.exit = c.exit;
    r.dim = c.dim();
    r.worker.base_seed = c.seed;
    r.worker.ensemble_dir = c.ensemble_dir;
    r.worker.platform = detect_platform(env, c.platform_overrides, c.platform_name);
    r.worker.apps = c.apps;
    r.worker.gen_user = c.gen.user;
    r.worker.sim_user = c.sim.user;

    if (c.inventory == InventorySource::file) r.inventory = read_inventory_file(*c.inventory_file);
    else if (c.inventory == InventorySource::detected)
        r.inventory = detect_nodes(env, std::nullopt,
                                   NodeDefaults{r.worker.platform.cores_per_node, r.worker.platform.gpus_per_node});
    r.schedule = c.schedule;
    r.rset_options = c.rset_options;
    r.dedicated_gen_worker = c.gen.persis && c.comms == CommsMode::local;
    r.async_return = c.async_return;
    r.dump_path = c.dump_path.is_relative() ? c.ensemble_dir / c.dump_path : c.dump_path;
    r.dump_every = c.dump_every;
    r.abort_on_exception = c.abort_on_exception;
    r.kill_canceled_sims = c.kill_canceled_sims;
    r.shutdown_timeout = c.shutdown_timeout;

    p.gen = generator_registry().at(c.gen.gen_f);
    p.sim = simulator_registry().at(c.sim.sim_f);
    p.alloc = allocator_registry().at(c.alloc_f);
    return p;
}

}  // namespace dynens
