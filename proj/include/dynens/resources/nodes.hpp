#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dynens/resources/platform.hpp"

namespace dynens {

struct NodeInfo {
    std::string name;
    int cores = 0;
    int gpus = 0;

    bool operator==(const NodeInfo&) const = default;
};

struct NodeInventory {
    std::vector<NodeInfo> nodes;

    int total_cores() const;
    int total_gpus() const;
    bool operator==(const NodeInventory&) const = default;
};

class NodeListError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Expands compressed host lists such as "nid[000001-000003,7],login1".
/// Zero padding follows the width of the range's lower bound.
std::vector<std::string> expand_nodelist(std::string_view list);

/// Per-node counts used when the scheduler lists names only.
struct NodeDefaults {
    int cores = 1;
    int gpus = 0;
};

/// Node inventory from the batch environment.
///
/// Consulted in order: SLURM_JOB_NODELIST / SLURM_NODELIST (compressed list),
/// PBS_NODEFILE (file, one host per line, repeats collapsed), COBALT_PARTNAME
/// (numeric ranges, named nid%05d), LSB_MCPU_HOSTS (host/count pairs, the
/// first entry is the launch host and is skipped when others exist). Without
/// any of these, the fallback inventory is returned verbatim, else a single
/// "localhost" node.
NodeInventory detect_nodes(const EnvSnapshot& env, const std::optional<NodeInventory>& fallback = std::nullopt,
                           NodeDefaults defaults = {});

/// Synthetic inventory file: one node per line, "name cores gpus"; '#' starts a comment.
NodeInventory read_inventory_file(const std::filesystem::path& path);

}  // namespace dynens
