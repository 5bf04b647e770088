#pragma once

#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dynens/history.hpp"
#include "dynens/runtime/messages.hpp"

namespace dynens {

enum class WorkerStatus { IDLE, BUSY_SIM, BUSY_GEN, PERSISTENT_GEN };

struct WorkerState {
    int worker_id = 0;
    WorkerStatus status = WorkerStatus::IDLE;
    bool can_sim = true;
    bool can_gen = true;
    std::vector<SimId> active_ids;
    std::optional<Assignment> assignment;
};

struct Work {
    int target_worker = 0;
    MessageTag tag = MessageTag::EVAL_SIM;
    std::vector<SimId> record_ids;
    bool persistent = false;
    std::optional<Assignment> assignment;
};

/// Free resource sets plus the scheduler, as the allocator sees them.
class ResourcePool {
public:
    ResourcePool(std::vector<ResourceSet> rsets, PlatformSpec platform, ScheduleOptions options);

    /// The request a record makes; an empty request asks for one process.
    static ResourceRequest request_for(const EnsembleRecord& r);
    std::optional<Assignment> schedule(const ResourceRequest& request);
    void release(const Assignment& a);
    /// Whether the request could ever fit with every set free.
    bool satisfiable(const ResourceRequest& request) const;
    const std::vector<ResourceSet>& rsets() const noexcept { return rsets_; }
    std::size_t free_count() const;

private:
    std::vector<ResourceSet> rsets_;
    PlatformSpec platform_;
    ScheduleOptions options_;
};

/// Manager bookkeeping for the persistent generator.
struct GenTracking {
    std::optional<int> worker;
    bool started = false;
    bool finished = false;
    /// Ids the generator submitted whose results it has not yet been sent.
    std::set<SimId> outstanding;
    /// Returned records not yet forwarded, in return order.
    std::vector<SimId> unforwarded;
};

struct AllocInput {
    const History& history;
    std::span<const WorkerState> workers;
    ResourcePool* resources = nullptr;
    const GenTracking& gen;
    /// Sims that may still be dispatched before sim_max is reached.
    std::optional<std::size_t> sim_budget;
    /// gen_max reached.
    bool gen_exhausted = false;
    bool async_return = false;
    std::vector<std::string>* warnings = nullptr;
};

using AllocFn = std::function<std::vector<Work>(AllocInput&)>;

/// Idle workers in id order take the best pending record; with nothing
/// pending and no generator running, one idle worker generates.
std::vector<Work> default_alloc(AllocInput& in);

/// One persistent generator on the first generator-capable worker, results
/// streamed back to it (per batch, or as they arrive with async_return),
/// simulations handed out as in default_alloc.
std::vector<Work> persistent_alloc(AllocInput& in);

}  // namespace dynens
