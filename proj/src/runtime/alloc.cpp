#include "dynens/runtime/alloc.hpp"

#include <algorithm>

namespace dynens {

ResourcePool::ResourcePool(std::vector<ResourceSet> rsets, PlatformSpec platform, ScheduleOptions options)
    : rsets_(std::move(rsets)), platform_(std::move(platform)), options_(options) {}

ResourceRequest ResourcePool::request_for(const EnsembleRecord& r) {
    ResourceRequest req;
    if (r.num_procs > 0) req.num_procs = r.num_procs;
    if (r.num_gpus > 0) req.num_gpus = r.num_gpus;
    if (req.empty()) req.num_procs = 1;
    return req;
}

std::optional<Assignment> ResourcePool::schedule(const ResourceRequest& request) {
    return dynens::schedule(request, rsets_, platform_, options_);
}

void ResourcePool::release(const Assignment& a) { dynens::release(a, rsets_); }

bool ResourcePool::satisfiable(const ResourceRequest& request) const {
    auto all = rsets_;
    for (auto& r : all) r.free = true;
    return dynens::schedule(request, all, platform_, options_).has_value();
}

std::size_t ResourcePool::free_count() const {
    return static_cast<std::size_t>(std::count_if(rsets_.begin(), rsets_.end(), [](auto& r) { return r.free; }));
}

namespace {

void warn_once(AllocInput& in, const std::string& msg) {
    if (!in.warnings) return;
    if (std::find(in.warnings->begin(), in.warnings->end(), msg) == in.warnings->end()) in.warnings->push_back(msg);
}

// Hands pending records to idle simulation workers. `skip` holds workers
// already given work this round.
void give_sims(AllocInput& in, std::vector<Work>& works, const std::vector<int>& skip) {
    auto pending = in.history.pending_sims();
    std::size_t next = 0;
    std::size_t budget = in.sim_budget.value_or(pending.size());
    for (const auto& w : in.workers) {
        if (w.status != WorkerStatus::IDLE || !w.can_sim) continue;
        if (std::find(skip.begin(), skip.end(), w.worker_id) != skip.end()) continue;
        bool blocked = false;
        while (next < pending.size() && budget > 0) {
            SimId id = pending[next];
            std::optional<Assignment> a;
            if (in.resources) {
                auto req = ResourcePool::request_for(in.history.at(id));
                a = in.resources->schedule(req);
                if (!a) {
                    if (!in.resources->satisfiable(req)) {
                        warn_once(in, "sim_id " + std::to_string(id) + " requests more than the total resources; deferred");
                        ++next;
                        continue;
                    }
                    blocked = true;
                    break;
                }
            }
            works.push_back(Work{w.worker_id, MessageTag::EVAL_SIM, {id}, false, std::move(a)});
            ++next;
            --budget;
            break;
        }
        if (blocked || budget == 0 || next >= pending.size()) break;
    }
}

bool gen_busy(const AllocInput& in) {
    return std::any_of(in.workers.begin(), in.workers.end(), [](const WorkerState& w) {
        return w.status == WorkerStatus::BUSY_GEN || w.status == WorkerStatus::PERSISTENT_GEN;
    });
}

}  // namespace

std::vector<Work> default_alloc(AllocInput& in) {
    std::vector<Work> works;
    give_sims(in, works, {});

    std::vector<int> used;
    for (const auto& w : works) used.push_back(w.target_worker);
    bool budget_left = !in.sim_budget || *in.sim_budget > used.size();
    if (!gen_busy(in) && !in.gen_exhausted && budget_left) {
        // Generate only when nothing undispatched could be handed out.
        auto pending = in.history.pending_sims();
        bool all_taken = pending.size() <= used.size();
        if (all_taken) {
            for (const auto& w : in.workers) {
                if (w.status != WorkerStatus::IDLE || !w.can_gen) continue;
                if (std::find(used.begin(), used.end(), w.worker_id) != used.end()) continue;
                works.push_back(Work{w.worker_id, MessageTag::EVAL_GEN, {}, false, std::nullopt});
                break;
            }
        }
    }
    return works;
}

std::vector<Work> persistent_alloc(AllocInput& in) {
    std::vector<Work> works;
    std::vector<int> used;
    const auto& gen = in.gen;

    if (!gen.started && !gen.finished && !in.gen_exhausted) {
        for (const auto& w : in.workers) {
            if (w.status != WorkerStatus::IDLE || !w.can_gen) continue;
            std::vector<SimId> h_in;
            for (const auto& r : in.history.records()) h_in.push_back(r.sim_id);
            works.push_back(Work{w.worker_id, MessageTag::EVAL_GEN, std::move(h_in), true, std::nullopt});
            used.push_back(w.worker_id);
            break;
        }
    } else if (gen.started && !gen.finished && gen.worker) {
        bool ready;
        if (in.async_return) {
            ready = !gen.unforwarded.empty();
        } else {
            bool all_done = std::all_of(gen.outstanding.begin(), gen.outstanding.end(), [&](SimId id) {
                const auto& r = in.history.at(id);
                return r.returned || (r.cancel_requested && !r.given);
            });
            ready = all_done && (!gen.outstanding.empty() || !gen.unforwarded.empty());
        }
        if (ready) works.push_back(Work{*gen.worker, MessageTag::EVAL_GEN, gen.unforwarded, true, std::nullopt});
    }

    give_sims(in, works, used);
    return works;
}

}  // namespace dynens
