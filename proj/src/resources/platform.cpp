#include "dynens/resources/platform.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <thread>

#include <unistd.h>

extern char** environ;

namespace dynens {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) pos = s.size();
        if (pos > start) out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

bool on_path(const EnvSnapshot& env, const std::string& exe) {
    auto it = env.find("PATH");
    if (it == env.end()) return false;
    for (const auto& dir : split(it->second, ':')) {
        auto p = std::filesystem::path(dir) / exe;
        if (::access(p.c_str(), X_OK) == 0 && !std::filesystem::is_directory(p)) return true;
    }
    return false;
}

template <typename T>
void apply(std::optional<T>& dst, const std::optional<T>& src) {
    if (src) dst = src;
}

void layer(PlatformOverrides& dst, const PlatformOverrides& src) {
    if (src.mpi_runner && !src.runner_name) dst.runner_name.reset();
    apply(dst.mpi_runner, src.mpi_runner);
    apply(dst.runner_name, src.runner_name);
    apply(dst.cores_per_node, src.cores_per_node);
    apply(dst.logical_cores_per_node, src.logical_cores_per_node);
    apply(dst.gpus_per_node, src.gpus_per_node);
    apply(dst.tiles_per_gpu, src.tiles_per_gpu);
    apply(dst.gpu_setting_type, src.gpu_setting_type);
    apply(dst.gpu_setting_name, src.gpu_setting_name);
    apply(dst.gpu_env_fallback, src.gpu_env_fallback);
    apply(dst.scheduler_match_slots, src.scheduler_match_slots);
}

PlatformOverrides detected(const EnvSnapshot& env) {
    PlatformOverrides d;
    const bool in_slurm = env.count("SLURM_JOB_ID") || env.count("SLURM_JOBID");
    const bool in_lsf = env.count("LSB_JOBID") > 0;
    if (in_slurm && on_path(env, "srun")) {
        d.mpi_runner = MpiRunner::srun;
    } else if (in_lsf && on_path(env, "jsrun")) {
        d.mpi_runner = MpiRunner::jsrun;
    } else if (on_path(env, "aprun")) {
        d.mpi_runner = MpiRunner::aprun;
    } else if (on_path(env, "mpiexec") || on_path(env, "mpirun")) {
        // Open MPI ships ompi_info next to its launcher; MPICH does not.
        if (on_path(env, "ompi_info")) {
            d.mpi_runner = MpiRunner::openmpi;
        } else {
            d.mpi_runner = MpiRunner::mpich;
            d.runner_name = on_path(env, "mpiexec") ? "mpiexec" : "mpirun";
        }
    }

    for (const char* var : {"ZE_AFFINITY_MASK", "ROCR_VISIBLE_DEVICES", "CUDA_VISIBLE_DEVICES"}) {
        auto it = env.find(var);
        if (it == env.end() || it->second.empty()) continue;
        d.gpus_per_node = static_cast<int>(split(it->second, ',').size());
        d.gpu_setting_type = GpuSettingType::env;
        d.gpu_setting_name = var;
        break;
    }

    if (auto hw = static_cast<int>(std::thread::hardware_concurrency()); hw > 0) {
        d.cores_per_node = hw;
        d.logical_cores_per_node = hw;
    }
    return d;
}

}  // namespace

EnvSnapshot capture_environment() {
    EnvSnapshot env;
    for (char** e = environ; e && *e; ++e) {
        std::string_view kv(*e);
        auto eq = kv.find('=');
        if (eq == std::string_view::npos) continue;
        env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
    }
    return env;
}

std::string_view to_string(MpiRunner r) {
    switch (r) {
        case MpiRunner::mpich: return "mpich";
        case MpiRunner::openmpi: return "openmpi";
        case MpiRunner::srun: return "srun";
        case MpiRunner::jsrun: return "jsrun";
        case MpiRunner::aprun: return "aprun";
    }
    return "?";
}

std::string_view to_string(GpuSettingType t) {
    switch (t) {
        case GpuSettingType::env: return "env";
        case GpuSettingType::runner_default: return "runner_default";
        case GpuSettingType::option_gpus_per_node: return "option_gpus_per_node";
    }
    return "?";
}

MpiRunner parse_mpi_runner(std::string_view s) {
    const auto l = lower(s);
    if (l == "mpich" || l == "mpiexec") return MpiRunner::mpich;
    if (l == "openmpi" || l == "mpirun") return MpiRunner::openmpi;
    if (l == "srun") return MpiRunner::srun;
    if (l == "jsrun") return MpiRunner::jsrun;
    if (l == "aprun") return MpiRunner::aprun;
    throw PlatformError("unknown mpi_runner '" + std::string(s) + "'");
}

GpuSettingType parse_gpu_setting_type(std::string_view s) {
    const auto l = lower(s);
    if (l == "env") return GpuSettingType::env;
    if (l == "runner_default") return GpuSettingType::runner_default;
    if (l == "option_gpus_per_node") return GpuSettingType::option_gpus_per_node;
    throw PlatformError("unknown gpu_setting_type '" + std::string(s) + "'");
}

std::string_view default_runner_name(MpiRunner r) {
    switch (r) {
        case MpiRunner::mpich: return "mpiexec";
        case MpiRunner::openmpi: return "mpirun";
        case MpiRunner::srun: return "srun";
        case MpiRunner::jsrun: return "jsrun";
        case MpiRunner::aprun: return "aprun";
    }
    return "mpiexec";
}

void PlatformSpec::validate() const {
    if (runner_name.empty()) throw PlatformError("runner_name is empty");
    if (cores_per_node < 1) throw PlatformError("cores_per_node must be >= 1");
    if (cores_per_node > logical_cores_per_node)
        throw PlatformError("cores_per_node exceeds logical_cores_per_node");
    if (gpus_per_node < 0) throw PlatformError("gpus_per_node must be >= 0");
    if (tiles_per_gpu < 1) throw PlatformError("tiles_per_gpu must be >= 1");
    if (gpu_setting_type == GpuSettingType::env && gpu_setting_name.empty())
        throw PlatformError("gpu_setting_type=env requires a gpu_setting_name");
    if (gpu_setting_type == GpuSettingType::option_gpus_per_node && gpu_setting_name.empty())
        throw PlatformError("gpu_setting_type=option_gpus_per_node requires a gpu_setting_name");
}

std::vector<std::string> known_platform_names() { return {"aurora", "frontier", "perlmutter", "generic"}; }

std::optional<PlatformOverrides> known_platform(std::string_view name) {
    const auto l = lower(name);
    PlatformOverrides p;
    if (l == "aurora") {
        p.mpi_runner = MpiRunner::mpich;
        p.runner_name = "mpiexec";
        p.cores_per_node = 104;
        p.logical_cores_per_node = 208;
        p.gpus_per_node = 6;
        p.tiles_per_gpu = 2;
        p.gpu_setting_type = GpuSettingType::env;
        p.gpu_setting_name = "ZE_AFFINITY_MASK";
        p.scheduler_match_slots = true;
        return p;
    }
    if (l == "frontier") {
        p.mpi_runner = MpiRunner::srun;
        p.cores_per_node = 64;
        p.logical_cores_per_node = 128;
        p.gpus_per_node = 8;
        p.gpu_setting_type = GpuSettingType::runner_default;
        p.gpu_env_fallback = "ROCR_VISIBLE_DEVICES";
        p.scheduler_match_slots = false;
        return p;
    }
    if (l == "perlmutter") {
        p.mpi_runner = MpiRunner::srun;
        p.cores_per_node = 64;
        p.logical_cores_per_node = 128;
        p.gpus_per_node = 4;
        p.gpu_setting_type = GpuSettingType::runner_default;
        p.gpu_env_fallback = "CUDA_VISIBLE_DEVICES";
        p.scheduler_match_slots = false;
        return p;
    }
    if (l == "generic") return p;
    return std::nullopt;
}

PlatformSpec detect_platform(const EnvSnapshot& env, const PlatformOverrides& overrides,
                             std::optional<std::string> known_name) {
    if (!known_name) {
        if (auto it = env.find(kPlatformEnvVar); it != env.end() && !it->second.empty()) known_name = it->second;
    }

    // Lowest precedence first; each layer only fills what it knows.
    PlatformOverrides merged = detected(env);
    if (known_name) {
        auto table = known_platform(*known_name);
        if (!table) throw PlatformError("unknown platform '" + *known_name + "'");
        // A table entry describes the machine completely; do not let local
        // detection leak into fields the entry leaves at their defaults.
        merged = PlatformOverrides{};
        layer(merged, *table);
    }
    layer(merged, overrides);

    PlatformSpec spec;
    if (merged.mpi_runner) {
        spec.mpi_runner = *merged.mpi_runner;
        spec.runner_name = std::string(default_runner_name(spec.mpi_runner));
    }
    if (merged.runner_name) spec.runner_name = *merged.runner_name;
    if (merged.cores_per_node) spec.cores_per_node = *merged.cores_per_node;
    spec.logical_cores_per_node = merged.logical_cores_per_node.value_or(spec.cores_per_node);
    if (merged.gpus_per_node) spec.gpus_per_node = *merged.gpus_per_node;
    if (merged.tiles_per_gpu) spec.tiles_per_gpu = *merged.tiles_per_gpu;
    if (merged.gpu_setting_type) spec.gpu_setting_type = *merged.gpu_setting_type;
    if (merged.gpu_setting_name) {
        spec.gpu_setting_name = *merged.gpu_setting_name;
    } else if (spec.gpu_setting_type == GpuSettingType::option_gpus_per_node) {
        spec.gpu_setting_name = "--gpus-per-node";
    } else if (spec.gpu_setting_type == GpuSettingType::runner_default) {
        spec.gpu_setting_name.clear();
    }
    spec.gpu_env_fallback = merged.gpu_env_fallback;
    if (merged.scheduler_match_slots) spec.scheduler_match_slots = *merged.scheduler_match_slots;

    spec.validate();
    return spec;
}

}  // namespace dynens
