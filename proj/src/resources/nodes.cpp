#include "dynens/resources/nodes.hpp"

#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace dynens {

namespace {

std::vector<std::string_view> split_top_level(std::string_view list) {
    std::vector<std::string_view> items;
    int depth = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i < list.size(); ++i) {
        char c = list[i];
        if (c == '[') {
            if (++depth > 1) throw NodeListError("nested '[' in node list: " + std::string(list));
        } else if (c == ']') {
            if (--depth < 0) throw NodeListError("unbalanced ']' in node list: " + std::string(list));
        } else if (c == ',' && depth == 0) {
            items.push_back(list.substr(start, i - start));
            start = i + 1;
        }
    }
    if (depth != 0) throw NodeListError("unterminated '[' in node list: " + std::string(list));
    items.push_back(list.substr(start));
    return items;
}

long parse_index(std::string_view s, std::string_view whole) {
    long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size())
        throw NodeListError("bad range bound '" + std::string(s) + "' in " + std::string(whole));
    return v;
}

std::string pad(long v, std::size_t width) {
    auto s = std::to_string(v);
    if (s.size() < width) s.insert(0, width - s.size(), '0');
    return s;
}

std::vector<std::string> expand_ranges(std::string_view body, std::string_view whole) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= body.size()) {
        auto comma = body.find(',', start);
        if (comma == std::string_view::npos) comma = body.size();
        auto part = body.substr(start, comma - start);
        if (part.empty()) throw NodeListError("empty range in " + std::string(whole));
        auto dash = part.find('-');
        if (dash == std::string_view::npos) {
            parse_index(part, whole);
            out.emplace_back(part);
        } else {
            auto lo_s = part.substr(0, dash);
            auto hi_s = part.substr(dash + 1);
            long lo = parse_index(lo_s, whole);
            long hi = parse_index(hi_s, whole);
            if (hi < lo) throw NodeListError("descending range '" + std::string(part) + "' in " + std::string(whole));
            for (long v = lo; v <= hi; ++v) out.push_back(pad(v, lo_s.size()));
        }
        start = comma + 1;
    }
    return out;
}

std::vector<std::string> expand_item(std::string_view item, std::string_view whole) {
    auto open = item.find('[');
    if (open == std::string_view::npos) {
        if (item.find(']') != std::string_view::npos) throw NodeListError("stray ']' in " + std::string(whole));
        return {std::string(item)};
    }
    auto close = item.find(']', open);
    if (close == std::string_view::npos) throw NodeListError("unterminated '[' in " + std::string(whole));
    auto prefix = item.substr(0, open);
    auto middles = expand_ranges(item.substr(open + 1, close - open - 1), whole);
    auto suffixes = expand_item(item.substr(close + 1), whole);
    std::vector<std::string> out;
    for (const auto& m : middles)
        for (const auto& s : suffixes) out.push_back(std::string(prefix) + m + s);
    return out;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

NodeInventory from_names(const std::vector<std::string>& names, NodeDefaults d) {
    NodeInventory inv;
    for (const auto& n : names) inv.nodes.push_back({n, d.cores, d.gpus});
    return inv;
}

}  // namespace

int NodeInventory::total_cores() const {
    return std::accumulate(nodes.begin(), nodes.end(), 0, [](int a, const NodeInfo& n) { return a + n.cores; });
}

int NodeInventory::total_gpus() const {
    return std::accumulate(nodes.begin(), nodes.end(), 0, [](int a, const NodeInfo& n) { return a + n.gpus; });
}

std::vector<std::string> expand_nodelist(std::string_view list) {
    auto trimmed = trim(list);
    if (trimmed.empty()) throw NodeListError("empty node list");
    std::vector<std::string> out;
    for (auto item : split_top_level(trimmed)) {
        if (item.empty()) throw NodeListError("empty entry in node list: " + trimmed);
        for (auto& name : expand_item(item, trimmed)) {
            if (name.empty()) throw NodeListError("empty host name in node list: " + trimmed);
            out.push_back(std::move(name));
        }
    }
    return out;
}

NodeInventory detect_nodes(const EnvSnapshot& env, const std::optional<NodeInventory>& fallback,
                           NodeDefaults defaults) {
    auto get = [&](const char* k) -> const std::string* {
        auto it = env.find(k);
        return it == env.end() || it->second.empty() ? nullptr : &it->second;
    };

    for (const char* var : {"SLURM_JOB_NODELIST", "SLURM_NODELIST"}) {
        if (const auto* v = get(var)) {
            NodeDefaults d = defaults;
            if (const auto* cpus = get("SLURM_CPUS_ON_NODE")) {
                int c = 0;
                std::from_chars(cpus->data(), cpus->data() + cpus->size(), c);
                if (c > 0) d.cores = c;
            }
            return from_names(expand_nodelist(*v), d);
        }
    }

    if (const auto* v = get("PBS_NODEFILE")) {
        std::ifstream in(*v);
        if (!in) throw NodeListError("cannot read PBS_NODEFILE " + *v);
        std::vector<std::string> names;
        std::set<std::string> seen;
        for (std::string line; std::getline(in, line);) {
            auto n = trim(line);
            if (!n.empty() && seen.insert(n).second) names.push_back(n);
        }
        if (names.empty()) throw NodeListError("PBS_NODEFILE " + *v + " lists no hosts");
        return from_names(names, defaults);
    }

    if (const auto* v = get("COBALT_PARTNAME")) {
        std::vector<std::string> names;
        for (const auto& idx : expand_ranges(*v, *v)) {
            long n = 0;
            std::from_chars(idx.data(), idx.data() + idx.size(), n);
            names.push_back("nid" + pad(n, 5));
        }
        return from_names(names, defaults);
    }

    if (const auto* v = get("LSB_MCPU_HOSTS")) {
        std::istringstream ss(*v);
        std::vector<std::string> names;
        std::string host;
        int count = 0;
        while (ss >> host) {
            if (!(ss >> count)) throw NodeListError("malformed LSB_MCPU_HOSTS: " + *v);
            names.push_back(host);
        }
        if (names.empty()) throw NodeListError("malformed LSB_MCPU_HOSTS: " + *v);
        if (names.size() > 1) names.erase(names.begin());
        return from_names(names, defaults);
    }

    if (fallback) return *fallback;

    int cores = static_cast<int>(std::thread::hardware_concurrency());
    return NodeInventory{{{"localhost", cores > 0 ? cores : defaults.cores, defaults.gpus}}};
}

NodeInventory read_inventory_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NodeListError("cannot open inventory file " + path.string());
    NodeInventory inv;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        std::istringstream ss(line);
        NodeInfo n;
        std::string extra;
        if (!(ss >> n.name >> n.cores >> n.gpus) || (ss >> extra) || n.cores < 1 || n.gpus < 0) {
            throw NodeListError(path.string() + ":" + std::to_string(line_no) +
                                ": expected 'name cores gpus' with cores >= 1, gpus >= 0");
        }
        inv.nodes.push_back(std::move(n));
    }
    if (inv.nodes.empty()) throw NodeListError("inventory file " + path.string() + " lists no nodes");
    return inv;
}

}  // namespace dynens
