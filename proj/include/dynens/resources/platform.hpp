#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dynens {

using EnvSnapshot = std::map<std::string, std::string>;

/// Copy of the calling process environment.
EnvSnapshot capture_environment();

enum class MpiRunner { mpich, openmpi, srun, jsrun, aprun };
enum class GpuSettingType { env, runner_default, option_gpus_per_node };

std::string_view to_string(MpiRunner r);
std::string_view to_string(GpuSettingType t);
MpiRunner parse_mpi_runner(std::string_view s);
GpuSettingType parse_gpu_setting_type(std::string_view s);

/// The executable a runner is launched with when the platform does not name one.
std::string_view default_runner_name(MpiRunner r);

class PlatformError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PlatformSpec {
    MpiRunner mpi_runner = MpiRunner::mpich;
    std::string runner_name = "mpiexec";
    int cores_per_node = 1;
    int logical_cores_per_node = 1;
    int gpus_per_node = 0;
    int tiles_per_gpu = 1;
    GpuSettingType gpu_setting_type = GpuSettingType::env;
    std::string gpu_setting_name = "CUDA_VISIBLE_DEVICES";
    std::optional<std::string> gpu_env_fallback;
    bool scheduler_match_slots = true;

    void validate() const;
    bool operator==(const PlatformSpec&) const = default;
};

/// Every field optional; set fields win over table entries and detection.
struct PlatformOverrides {
    std::optional<MpiRunner> mpi_runner;
    std::optional<std::string> runner_name;
    std::optional<int> cores_per_node;
    std::optional<int> logical_cores_per_node;
    std::optional<int> gpus_per_node;
    std::optional<int> tiles_per_gpu;
    std::optional<GpuSettingType> gpu_setting_type;
    std::optional<std::string> gpu_setting_name;
    std::optional<std::string> gpu_env_fallback;
    std::optional<bool> scheduler_match_slots;
};

/// Environment variable naming a known platform when none is given explicitly.
inline constexpr const char* kPlatformEnvVar = "DYNENS_PLATFORM";

std::vector<std::string> known_platform_names();

/// Table entry for `name` (case-insensitive), as overrides over the generic default.
std::optional<PlatformOverrides> known_platform(std::string_view name);

/// Resolves each field as: override > known-platform entry > detection > generic default.
///
/// Detection looks for a launcher on the snapshot's PATH (srun inside a SLURM
/// job, jsrun inside LSF, then aprun, mpiexec, mpirun), counts devices listed
/// in CUDA_VISIBLE_DEVICES / ROCR_VISIBLE_DEVICES / ZE_AFFINITY_MASK, and
/// uses the local hardware thread count for cores.
PlatformSpec detect_platform(const EnvSnapshot& env, const PlatformOverrides& overrides = {},
                             std::optional<std::string> known_name = std::nullopt);

}  // namespace dynens
