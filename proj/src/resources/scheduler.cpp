#include "dynens/resources/scheduler.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace dynens {

namespace {

int ceil_div(int a, int b) { return b <= 0 ? 0 : (a + b - 1) / b; }

/// Free slots of one node within the candidate pool, ascending by slot.
struct NodeFree {
    int node_index = 0;
    std::vector<int> slots;
    std::vector<std::size_t> rset_pos;  // parallel to slots
};

struct Placement {
    std::vector<std::size_t> rset_pos;
    int nodes = 0;
};

double binomial(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

bool contains_all(const std::vector<int>& sorted_slots, const std::vector<int>& wanted) {
    return std::includes(sorted_slots.begin(), sorted_slots.end(), wanted.begin(), wanted.end());
}

std::vector<std::size_t> positions_for(const NodeFree& n, const std::vector<int>& wanted) {
    std::vector<std::size_t> out;
    for (int slot : wanted) {
        auto it = std::lower_bound(n.slots.begin(), n.slots.end(), slot);
        out.push_back(n.rset_pos[static_cast<std::size_t>(it - n.slots.begin())]);
    }
    return out;
}

/// `c` sets on each of `m` nodes, no slot constraint: first m nodes with room, lowest slots.
std::optional<Placement> place_any(const std::vector<NodeFree>& nodes, int m, int c) {
    Placement p;
    for (const auto& n : nodes) {
        if (static_cast<int>(n.slots.size()) < c) continue;
        p.rset_pos.insert(p.rset_pos.end(), n.rset_pos.begin(), n.rset_pos.begin() + c);
        if (++p.nodes == m) return p;
    }
    return std::nullopt;
}

/// `c` sets on each of `m` nodes using one identical slot-index set.
std::optional<Placement> place_matched(const std::vector<NodeFree>& nodes, int m, int c, int slots_per_node) {
    if (m == 1) return place_any(nodes, m, c);

    auto take = [&](const std::vector<int>& wanted) -> std::optional<Placement> {
        Placement p;
        for (const auto& n : nodes) {
            if (!contains_all(n.slots, wanted)) continue;
            auto pos = positions_for(n, wanted);
            p.rset_pos.insert(p.rset_pos.end(), pos.begin(), pos.end());
            if (++p.nodes == m) return p;
        }
        return std::nullopt;
    };

    if (binomial(slots_per_node, c) <= 200000.0) {
        // Exact: slot sets in lexicographic order, first one free on m nodes wins.
        std::vector<int> combo(static_cast<std::size_t>(c));
        for (int i = 0; i < c; ++i) combo[static_cast<std::size_t>(i)] = i;
        while (true) {
            if (auto p = take(combo)) return p;
            int i = c - 1;
            while (i >= 0 && combo[static_cast<std::size_t>(i)] == slots_per_node - c + i) --i;
            if (i < 0) return std::nullopt;
            ++combo[static_cast<std::size_t>(i)];
            for (int j = i + 1; j < c; ++j) combo[static_cast<std::size_t>(j)] = combo[static_cast<std::size_t>(j - 1)] + 1;
        }
    }

    // Wide nodes: grow a running intersection from each anchor node.
    for (std::size_t a = 0; a < nodes.size(); ++a) {
        if (static_cast<int>(nodes[a].slots.size()) < c) continue;
        std::vector<int> common = nodes[a].slots;
        int count = 1;
        for (std::size_t b = a + 1; b < nodes.size() && count < m; ++b) {
            std::vector<int> inter;
            std::set_intersection(common.begin(), common.end(), nodes[b].slots.begin(), nodes[b].slots.end(),
                                  std::back_inserter(inter));
            if (static_cast<int>(inter.size()) >= c) {
                common = std::move(inter);
                ++count;
            }
        }
        if (count == m) {
            common.resize(static_cast<std::size_t>(c));
            return take(common);
        }
    }
    return std::nullopt;
}

struct Normalized {
    std::optional<int> procs;      // total procs when known up front
    std::optional<int> nodes;      // fixed node count
    std::optional<int> ppn;        // fixed procs per node
    int gpus = 0;
    bool whole_nodes = false;      // only num_nodes given
};

Normalized normalize(const ResourceRequest& r) {
    Normalized n;
    n.gpus = r.num_gpus.value_or(0);
    n.procs = r.num_procs;
    n.nodes = r.num_nodes;
    n.ppn = r.procs_per_node;
    if (n.ppn && n.procs && !n.nodes) n.nodes = ceil_div(*n.procs, *n.ppn);
    if (n.ppn && !n.procs && !n.nodes) n.nodes = 1;
    if (n.ppn && n.nodes && !n.procs) n.procs = *n.ppn * *n.nodes;
    if (!n.procs && n.gpus > 0) n.procs = n.gpus;
    if (!n.procs && n.nodes) n.whole_nodes = true;
    if (n.procs && *n.procs == 0 && n.gpus == 0) n.procs = 1;
    return n;
}

std::optional<Assignment> try_pool(const Normalized& req, std::vector<ResourceSet>& rsets,
                                   const std::vector<std::size_t>& pool, int slots_per_node, bool split2fit,
                                   bool match) {
    if (pool.empty()) return std::nullopt;
    const int cpr = rsets[pool.front()].cores;
    int gpr = 0;
    for (auto i : pool) gpr = std::max(gpr, rsets[i].gpus);
    if (req.gpus > 0 && gpr == 0) return std::nullopt;

    std::map<int, NodeFree> by_node;
    for (auto i : pool) {
        const auto& rs = rsets[i];
        if (!rs.free) continue;
        auto& nf = by_node[rs.node_index];
        nf.node_index = rs.node_index;
        nf.slots.push_back(rs.slot);
        nf.rset_pos.push_back(i);
    }
    std::vector<NodeFree> nodes;
    for (auto& [idx, nf] : by_node) {
        std::vector<std::size_t> order(nf.slots.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return nf.slots[a] < nf.slots[b]; });
        NodeFree sorted{nf.node_index, {}, {}};
        for (auto o : order) {
            sorted.slots.push_back(nf.slots[o]);
            sorted.rset_pos.push_back(nf.rset_pos[o]);
        }
        nodes.push_back(std::move(sorted));
    }
    std::set<int> pool_nodes;
    for (auto i : pool) pool_nodes.insert(rsets[i].node_index);
    const int total_nodes = static_cast<int>(pool_nodes.size());

    auto per_node_need = [&](int m) {
        if (req.whole_nodes) return slots_per_node;
        const int ppn = req.ppn ? *req.ppn : ceil_div(*req.procs, m);
        const int gpn = ceil_div(req.gpus, m);
        return std::max({1, ceil_div(ppn, cpr), gpr > 0 ? ceil_div(gpn, gpr) : 0});
    };

    std::vector<int> candidates;
    if (req.nodes) {
        candidates.push_back(*req.nodes);
    } else {
        const int k = std::max({1, ceil_div(*req.procs, cpr), gpr > 0 ? ceil_div(req.gpus, gpr) : 0});
        const int m_min = ceil_div(k, slots_per_node);
        for (int m = m_min; m <= (split2fit ? total_nodes : m_min); ++m) candidates.push_back(m);
    }

    for (int m : candidates) {
        if (m < 1 || m > total_nodes) continue;
        const int c = per_node_need(m);
        if (c > slots_per_node) continue;
        auto placed = match ? place_matched(nodes, m, c, slots_per_node) : place_any(nodes, m, c);
        if (!placed) continue;

        Assignment a;
        std::map<int, NodeAssignment> per_node;
        for (auto pos : placed->rset_pos) {
            auto& rs = rsets[pos];
            rs.free = false;
            a.rset_ids.push_back(rs.rset_id);
            auto& na = per_node[rs.node_index];
            na.node = rs.node_name;
            na.node_index = rs.node_index;
            na.slots.push_back(rs.slot);
            if (req.gpus > 0) na.gpu_ids.insert(na.gpu_ids.end(), rs.gpu_ids.begin(), rs.gpu_ids.end());
        }
        const int total = req.whole_nodes ? m * c * cpr : *req.procs;
        int i = 0;
        for (auto& [idx, na] : per_node) {
            std::sort(na.slots.begin(), na.slots.end());
            std::sort(na.gpu_ids.begin(), na.gpu_ids.end());
            na.procs = req.ppn ? *req.ppn : total / m + (i < total % m ? 1 : 0);
            a.total_gpus += static_cast<int>(na.gpu_ids.size());
            a.nodes.push_back(std::move(na));
            ++i;
        }
        a.total_procs = total;
        return a;
    }
    return std::nullopt;
}

}  // namespace

int Assignment::procs_per_node() const {
    int m = 0;
    for (const auto& n : nodes) m = std::max(m, n.procs);
    return m;
}

int Assignment::gpus_per_node() const {
    return nodes.empty() ? 0 : static_cast<int>(nodes.front().gpu_ids.size());
}

std::vector<ResourceSet> build_resource_sets(const NodeInventory& inventory, const PlatformSpec& platform,
                                             int num_workers, bool dedicated_gen, const ResourceSetOptions& options) {
    if (num_workers < 1) throw ResourceError("num_workers must be >= 1");
    if (inventory.nodes.empty()) throw ResourceError("empty node inventory");
    const int sim_workers = num_workers - (dedicated_gen ? 1 : 0);
    const int count = options.num_resource_sets.value_or(sim_workers);
    if (count < 1) throw ResourceError("no simulation workers to build resource sets for");

    const int num_nodes = static_cast<int>(inventory.nodes.size());
    if (count % num_nodes != 0) {
        throw ResourceError(std::to_string(count) + " resource sets do not divide evenly over " +
                            std::to_string(num_nodes) + " nodes");
    }
    const int slots = count / num_nodes;
    const int tiles = options.use_tiles ? platform.tiles_per_gpu : 1;

    const int cores = inventory.nodes.front().cores;
    std::optional<int> devices;
    for (const auto& n : inventory.nodes) {
        if (n.cores != cores) throw ResourceError("nodes have unequal core counts (" + n.name + ")");
        if (n.cores < 1) throw ResourceError("node " + n.name + " has no cores");
        if (n.gpus > 0) {
            if (devices && *devices != n.gpus * tiles) throw ResourceError("GPU nodes have unequal GPU counts");
            devices = n.gpus * tiles;
        }
    }
    if (cores % slots != 0) {
        throw ResourceError(std::to_string(cores) + " cores per node do not split into " + std::to_string(slots) +
                            " equal slots");
    }
    if (devices && *devices % slots != 0) {
        throw ResourceError(std::to_string(*devices) + " GPU devices per node do not split into " +
                            std::to_string(slots) + " equal slots");
    }

    std::vector<ResourceSet> out;
    int id = 0;
    for (int ni = 0; ni < num_nodes; ++ni) {
        const auto& n = inventory.nodes[static_cast<std::size_t>(ni)];
        const int per_slot_gpus = n.gpus > 0 ? n.gpus * tiles / slots : 0;
        for (int s = 0; s < slots; ++s) {
            ResourceSet rs;
            rs.rset_id = id++;
            rs.node_index = ni;
            rs.node_name = n.name;
            rs.slot = s;
            rs.cores = cores / slots;
            rs.gpus = per_slot_gpus;
            for (int g = 0; g < per_slot_gpus; ++g) rs.gpu_ids.push_back(s * per_slot_gpus + g);
            out.push_back(std::move(rs));
        }
    }
    return out;
}

void ResourceRequest::validate() const {
    for (const auto& [v, name] : {std::pair{num_procs, "num_procs"}, std::pair{num_nodes, "num_nodes"},
                                  std::pair{procs_per_node, "procs_per_node"}, std::pair{num_gpus, "num_gpus"}}) {
        if (v && *v < 0) throw ResourceError(std::string(name) + " must be >= 0");
    }
    if (num_nodes && *num_nodes == 0) throw ResourceError("num_nodes must be >= 1");
    if (procs_per_node && *procs_per_node == 0) throw ResourceError("procs_per_node must be >= 1");
    if (num_nodes && procs_per_node && num_procs && *num_procs != *num_nodes * *procs_per_node) {
        throw ResourceError("num_procs " + std::to_string(*num_procs) + " != num_nodes * procs_per_node");
    }
}

int rsets_needed(const ResourceRequest& request, int cores_per_rset, int gpus_per_rset) {
    const int gpus = request.num_gpus.value_or(0);
    const int procs = request.num_procs.value_or(gpus);
    return std::max({1, ceil_div(procs, cores_per_rset), gpus_per_rset > 0 ? ceil_div(gpus, gpus_per_rset) : 0});
}

std::optional<Assignment> schedule(const ResourceRequest& request, std::vector<ResourceSet>& rsets,
                                   const PlatformSpec& platform, const ScheduleOptions& options) {
    request.validate();
    if (request.empty()) throw ResourceError("empty resource request");
    if (rsets.empty()) return std::nullopt;

    const bool match = options.match_slots.value_or(platform.scheduler_match_slots);
    const auto req = normalize(request);

    std::map<int, int> per_node;
    for (const auto& rs : rsets) ++per_node[rs.node_index];
    int slots_per_node = 0;
    for (auto& [n, c] : per_node) slots_per_node = std::max(slots_per_node, c);

    std::vector<std::size_t> gpu_pool, cpu_pool, all;
    for (std::size_t i = 0; i < rsets.size(); ++i) {
        all.push_back(i);
        (rsets[i].gpus > 0 ? gpu_pool : cpu_pool).push_back(i);
    }

    if (req.gpus > 0) return try_pool(req, rsets, gpu_pool, slots_per_node, options.split2fit, match);
    if (auto a = try_pool(req, rsets, cpu_pool, slots_per_node, options.split2fit, match)) return a;
    if (cpu_pool.size() == all.size()) return std::nullopt;
    return try_pool(req, rsets, all, slots_per_node, options.split2fit, match);
}

void release(const Assignment& assignment, std::vector<ResourceSet>& rsets) {
    std::vector<std::size_t> pos;
    for (int id : assignment.rset_ids) {
        auto it = std::find_if(rsets.begin(), rsets.end(), [id](const ResourceSet& r) { return r.rset_id == id; });
        if (it == rsets.end()) throw ResourceError("release of unknown resource set " + std::to_string(id));
        if (it->free) throw ResourceError("double release of resource set " + std::to_string(id));
        pos.push_back(static_cast<std::size_t>(it - rsets.begin()));
    }
    for (auto p : pos) rsets[p].free = true;
}

}  // namespace dynens
