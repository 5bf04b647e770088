#pragma once

// Exhaustive reference for schedule(): enumerates node subsets and per-node
// set counts directly instead of searching the way the scheduler does.

#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dynens/resources.hpp"

namespace oracle {

using dynens::Assignment;
using dynens::ResourceRequest;
using dynens::ResourceSet;

inline int cdiv(int a, int b) { return (a + b - 1) / b; }

struct Demand {
    int procs = 0;
    int gpus = 0;
};

inline Demand demand(const ResourceRequest& r) {
    Demand d;
    d.gpus = r.num_gpus.value_or(0);
    d.procs = r.num_procs.value_or(d.gpus);
    if (d.procs == 0 && d.gpus == 0) d.procs = 1;
    return d;
}

// Free, eligible slot indices per node.
using FreeMap = std::map<int, std::set<int>>;

inline FreeMap free_slots(const std::vector<ResourceSet>& rsets, bool gpu_only, bool cpu_only) {
    FreeMap m;
    for (const auto& rs : rsets) {
        if (!rs.free) continue;
        if (gpu_only && rs.gpus == 0) continue;
        if (cpu_only && rs.gpus > 0) continue;
        m[rs.node_index].insert(rs.slot);
    }
    return m;
}

// Smallest node count m for which some m nodes can each give c sets (identical
// slot indices under match) covering ceil(procs/m) cores and ceil(gpus/m) GPUs per node.
inline std::optional<int> min_nodes(const FreeMap& free, int cores_per_set, int gpus_per_set, const Demand& d,
                                    bool match, int max_slots, std::optional<int> only_m = std::nullopt) {
    std::vector<int> nodes;
    for (const auto& [n, s] : free) nodes.push_back(n);
    const int N = static_cast<int>(nodes.size());
    std::optional<int> best;
    for (int mask = 1; mask < (1 << N); ++mask) {
        std::vector<int> chosen;
        for (int i = 0; i < N; ++i)
            if (mask & (1 << i)) chosen.push_back(nodes[i]);
        const int m = static_cast<int>(chosen.size());
        if (only_m && m != *only_m) continue;
        if (best && m >= *best) continue;
        for (int c = 1; c <= max_slots; ++c) {
            if (c * cores_per_set < cdiv(d.procs, m)) continue;
            if (d.gpus > 0 && c * gpus_per_set < cdiv(d.gpus, m)) continue;
            bool ok = true;
            if (match && m > 1) {
                std::set<int> common = free.at(chosen[0]);
                for (int k = 1; k < m; ++k) {
                    std::set<int> inter;
                    const auto& other = free.at(chosen[k]);
                    std::set_intersection(common.begin(), common.end(), other.begin(), other.end(),
                                          std::inserter(inter, inter.begin()));
                    common = inter;
                }
                ok = static_cast<int>(common.size()) >= c;
            } else {
                for (int n : chosen) ok = ok && static_cast<int>(free.at(n).size()) >= c;
            }
            if (ok) {
                best = m;
                break;
            }
        }
    }
    return best;
}

struct Expectation {
    std::optional<int> nodes;
    bool gpu_pool = false;
    bool cpu_pool = false;
};

// Which pool the scheduler should draw from and the minimum node count there.
inline Expectation expect(const ResourceRequest& req, const std::vector<ResourceSet>& rsets, bool match,
                          bool split2fit) {
    const Demand d = demand(req);
    std::map<int, int> per_node;
    int cores = 0, gpr = 0;
    bool any_cpu_only = false;
    for (const auto& rs : rsets) {
        ++per_node[rs.node_index];
        cores = rs.cores;
        gpr = std::max(gpr, rs.gpus);
        any_cpu_only = any_cpu_only || rs.gpus == 0;
    }
    int max_slots = 0;
    for (auto& [n, c] : per_node) max_slots = std::max(max_slots, c);

    auto in_pool = [&](bool gpu_only, bool cpu_only) -> std::optional<int> {
        int g = 0;
        std::set<int> nodes;
        for (const auto& rs : rsets) {
            if ((gpu_only && rs.gpus == 0) || (cpu_only && rs.gpus > 0)) continue;
            g = std::max(g, rs.gpus);
            nodes.insert(rs.node_index);
        }
        if (nodes.empty()) return std::nullopt;
        std::optional<int> only;
        if (!split2fit) {
            const int k = std::max({1, cdiv(d.procs, cores), g > 0 ? cdiv(d.gpus, g) : 0});
            only = cdiv(k, max_slots);
        }
        return min_nodes(free_slots(rsets, gpu_only, cpu_only), cores, g, d, match, max_slots, only);
    };

    Expectation e;
    if (d.gpus > 0) {
        if (gpr == 0) return e;
        e.gpu_pool = true;
        e.nodes = in_pool(true, false);
        return e;
    }
    if (any_cpu_only) {
        if (auto m = in_pool(false, true)) {
            e.cpu_pool = true;
            e.nodes = m;
            return e;
        }
    }
    e.nodes = in_pool(false, false);
    return e;
}

// Every structural constraint an assignment must satisfy. Empty string = fine.
inline std::string violations(const ResourceRequest& req, const Assignment& a, const std::vector<ResourceSet>& before,
                              const Expectation& e, bool match) {
    const Demand d = demand(req);
    std::map<int, const ResourceSet*> by_id;
    for (const auto& rs : before) by_id[rs.rset_id] = &rs;
    std::set<int> ids(a.rset_ids.begin(), a.rset_ids.end());
    if (ids.size() != a.rset_ids.size()) return "duplicate resource sets";
    std::map<int, std::set<int>> slots;
    std::map<int, int> node_cores, node_gpus;
    int gpus = 0;
    for (int id : a.rset_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) return "unknown resource set";
        const auto& rs = *it->second;
        if (!rs.free) return "resource set was not free";
        if (e.gpu_pool && rs.gpus == 0) return "CPU-only set used for a GPU request";
        if (e.cpu_pool && rs.gpus > 0) return "GPU set used while CPU-only sets sufficed";
        slots[rs.node_index].insert(rs.slot);
        node_cores[rs.node_index] += rs.cores;
        node_gpus[rs.node_index] += rs.gpus;
        gpus += rs.gpus;
    }
    if (static_cast<int>(a.num_nodes()) != static_cast<int>(slots.size())) return "node list disagrees with sets";
    std::size_t per = slots.begin()->second.size();
    for (auto& [n, s] : slots) {
        if (s.size() != per) return "uneven split across nodes";
        if (match && s != slots.begin()->second) return "slot sets differ across nodes";
    }
    if (a.total_procs != d.procs) return "total procs differ from the request";
    int procs = 0;
    for (const auto& na : a.nodes) {
        procs += na.procs;
        if (na.procs > node_cores[na.node_index]) return "node over-subscribed";
        if (d.gpus > 0) {
            if (static_cast<int>(na.gpu_ids.size()) != node_gpus[na.node_index]) return "gpu ids disagree with sets";
            std::set<int> g(na.gpu_ids.begin(), na.gpu_ids.end());
            if (g.size() != na.gpu_ids.size()) return "duplicate gpu ids";
        }
    }
    if (procs != d.procs) return "per-node procs do not add up";
    if (gpus < d.gpus) return "not enough GPUs";
    if (d.gpus > 0 && a.total_gpus != gpus) return "total_gpus wrong";
    return {};
}

struct Case {
    dynens::NodeInventory inventory;
    std::vector<ResourceSet> rsets;
    ResourceRequest request;
};

// Up to 4 nodes x up to 8 slots, some nodes GPU-less, random free pattern.
inline Case random_case(std::mt19937_64& rng, dynens::PlatformSpec& platform) {
    auto pick = [&](int lo, int hi) { return static_cast<int>(lo + rng() % static_cast<unsigned>(hi - lo + 1)); };
    Case c;
    const int nodes = pick(1, 4);
    const int slots = pick(1, 8);
    const int cores_per_slot = pick(1, 4);
    const int gpus_per_slot = pick(0, 2);
    const bool mixed = gpus_per_slot > 0 && rng() % 3 == 0;
    for (int n = 0; n < nodes; ++n) {
        const bool gpu_node = gpus_per_slot > 0 && !(mixed && n % 2 == 1);
        c.inventory.nodes.push_back({"n" + std::to_string(n), slots * cores_per_slot, gpu_node ? slots * gpus_per_slot : 0});
    }
    platform.cores_per_node = slots * cores_per_slot;
    platform.logical_cores_per_node = platform.cores_per_node;
    platform.gpus_per_node = slots * gpus_per_slot;
    c.rsets = dynens::build_resource_sets(c.inventory, platform, nodes * slots, false);
    for (auto& rs : c.rsets) rs.free = rng() % 4 != 0;

    const int total_cores = nodes * slots * cores_per_slot;
    const int total_gpus = c.inventory.total_gpus();
    switch (rng() % 3) {
    case 0:
        c.request.num_procs = pick(1, total_cores + 2);
        break;
    case 1:
        c.request.num_gpus = pick(1, std::max(1, total_gpus + 1));
        break;
    default:
        c.request.num_procs = pick(1, total_cores);
        c.request.num_gpus = pick(0, std::max(0, total_gpus));
        break;
    }
    return c;
}

}  // namespace oracle
