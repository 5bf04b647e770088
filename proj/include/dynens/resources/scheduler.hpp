#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynens/resources/nodes.hpp"
#include "dynens/resources/platform.hpp"

namespace dynens {

class ResourceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One worker-sized share of a node. Slots on a node are 0..s-1, all equal.
struct ResourceSet {
    int rset_id = 0;
    int node_index = 0;
    std::string node_name;
    int slot = 0;
    int cores = 0;
    int gpus = 0;
    /// Device ids on the node owned by this slot (tile ids when tiles are devices).
    std::vector<int> gpu_ids;
    bool free = true;

    bool operator==(const ResourceSet&) const = default;
};

struct ResourceSetOptions {
    /// Treat each GPU tile as a schedulable device.
    bool use_tiles = false;
    /// Number of resource sets to build; defaults to the number of simulation workers.
    std::optional<int> num_resource_sets;
};

/// Splits every node into equal slots, one resource set per simulation worker.
/// A dedicated persistent-generator worker takes no resource set.
///
/// Throws ResourceError when the split is not exact: the set count must be a
/// multiple of the node count, cores and GPUs must divide evenly into slots,
/// all nodes need equal cores, and all GPU-bearing nodes equal GPUs.
std::vector<ResourceSet> build_resource_sets(const NodeInventory& inventory, const PlatformSpec& platform,
                                             int num_workers, bool dedicated_gen,
                                             const ResourceSetOptions& options = {});

struct ResourceRequest {
    std::optional<int> num_procs;
    std::optional<int> num_nodes;
    std::optional<int> procs_per_node;
    std::optional<int> num_gpus;

    bool empty() const { return !num_procs && !num_nodes && !procs_per_node && !num_gpus; }
    /// Rejects negative counts and num_procs != num_nodes * procs_per_node.
    void validate() const;
    bool operator==(const ResourceRequest&) const = default;
};

struct NodeAssignment {
    std::string node;
    int node_index = 0;
    std::vector<int> slots;
    std::vector<int> gpu_ids;
    int procs = 0;

    bool operator==(const NodeAssignment&) const = default;
};

struct Assignment {
    std::vector<NodeAssignment> nodes;
    std::vector<int> rset_ids;
    int total_procs = 0;
    int total_gpus = 0;

    std::size_t num_nodes() const { return nodes.size(); }
    /// Largest per-node process count.
    int procs_per_node() const;
    /// GPUs on each node; uniform across nodes by construction.
    int gpus_per_node() const;
    bool operator==(const Assignment&) const = default;
};

struct ScheduleOptions {
    bool split2fit = true;
    /// Defaults to the platform's scheduler_match_slots.
    std::optional<bool> match_slots;
};

/// Number of resource sets a request needs given the per-set capacity:
/// max(ceil(procs / cores_per_rset), ceil(gpus / gpus_per_rset)), at least 1.
/// When only num_gpus is given, procs default to one per GPU.
int rsets_needed(const ResourceRequest& request, int cores_per_rset, int gpus_per_rset);

/// Places `request` onto free resource sets and marks them taken.
///
/// Prefers the fewest nodes (ties: lowest node index, then lowest slot). Each
/// chosen node contributes the same number of sets. When the minimal node
/// count cannot be met and split2fit is on, larger node counts are tried.
/// GPU requests only use GPU-bearing sets; CPU-only requests use CPU-only sets
/// first and fall back to any set. Returns nullopt when the request does not
/// fit right now; throws ResourceError for malformed requests.
std::optional<Assignment> schedule(const ResourceRequest& request, std::vector<ResourceSet>& rsets,
                                   const PlatformSpec& platform, const ScheduleOptions& options = {});

/// Frees every set of `assignment`; throws ResourceError on double release.
void release(const Assignment& assignment, std::vector<ResourceSet>& rsets);

}  // namespace dynens
