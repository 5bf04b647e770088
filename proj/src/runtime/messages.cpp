#include "dynens/runtime/messages.hpp"

#include <cmath>

namespace dynens {

using nlohmann::json;

namespace {

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

json point_json(const Point& p) {
    return json::array({p.sim_id, p.x, p.f, p.priority, p.num_procs, p.num_gpus});
}

Point point_from(const json& j) {
    Point p;
    p.sim_id = j.at(0).get<SimId>();
    p.x = j.at(1).get<std::vector<double>>();
    // msgpack keeps NaN as a float; a null only appears from hand-made JSON.
    p.f = j.at(2).is_null() ? kNaN : j.at(2).get<double>();
    p.priority = j.at(3).get<double>();
    p.num_procs = j.at(4).get<int>();
    p.num_gpus = j.at(5).get<int>();
    return p;
}

}  // namespace

std::string_view to_string(MessageTag t) {
    switch (t) {
        case MessageTag::EVAL_GEN: return "EVAL_GEN";
        case MessageTag::EVAL_SIM: return "EVAL_SIM";
        case MessageTag::STOP: return "STOP";
        case MessageTag::PERSIS_STOP: return "PERSIS_STOP";
        case MessageTag::FINISHED_PERSISTENT_GEN: return "FINISHED_PERSISTENT_GEN";
        case MessageTag::RESULT: return "RESULT";
        case MessageTag::KILL: return "KILL";
    }
    return "?";
}

std::string_view to_string(CalcStatus s) {
    switch (s) {
        case CalcStatus::ok: return "ok";
        case CalcStatus::failed: return "failed";
        case CalcStatus::killed: return "killed";
    }
    return "?";
}

bool Point::operator==(const Point& o) const {
    if (x.size() != o.x.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!same(x[i], o.x[i])) return false;
    return sim_id == o.sim_id && same(f, o.f) && same(priority, o.priority) && num_procs == o.num_procs &&
           num_gpus == o.num_gpus;
}

Point to_point(const EnsembleRecord& r) {
    return Point{r.sim_id, r.x, r.f, r.priority, r.num_procs, r.num_gpus};
}

json to_json(const Assignment& a) {
    json nodes = json::array();
    for (const auto& n : a.nodes)
        nodes.push_back({{"node", n.node}, {"index", n.node_index}, {"slots", n.slots}, {"gpus", n.gpu_ids},
                         {"procs", n.procs}});
    return {{"nodes", nodes}, {"rsets", a.rset_ids}, {"procs", a.total_procs}, {"gpus", a.total_gpus}};
}

Assignment assignment_from_json(const json& j) {
    Assignment a;
    for (const auto& n : j.at("nodes")) {
        a.nodes.push_back(NodeAssignment{n.at("node").get<std::string>(), n.at("index").get<int>(),
                                         n.at("slots").get<std::vector<int>>(), n.at("gpus").get<std::vector<int>>(),
                                         n.at("procs").get<int>()});
    }
    a.rset_ids = j.at("rsets").get<std::vector<int>>();
    a.total_procs = j.at("procs").get<int>();
    a.total_gpus = j.at("gpus").get<int>();
    return a;
}

std::vector<std::uint8_t> encode(const Message& m) {
    json batch = json::array();
    for (const auto& p : m.batch) batch.push_back(point_json(p));
    json j = {{"t", static_cast<int>(m.tag)}, {"b", std::move(batch)}};
    if (!m.ids.empty()) j["i"] = m.ids;
    if (m.status != CalcStatus::ok) j["s"] = static_cast<int>(m.status);
    if (!m.error.empty()) j["e"] = m.error;
    if (m.persistent) j["p"] = true;
    if (m.next_id) j["n"] = m.next_id;
    if (m.assignment) j["a"] = to_json(*m.assignment);
    return json::to_msgpack(j);
}

Message decode(const std::vector<std::uint8_t>& bytes) {
    json j = json::from_msgpack(bytes);
    Message m;
    int tag = j.at("t").get<int>();
    if (tag < 0 || tag > static_cast<int>(MessageTag::KILL)) throw std::runtime_error("unknown message tag");
    m.tag = static_cast<MessageTag>(tag);
    for (const auto& p : j.at("b")) m.batch.push_back(point_from(p));
    if (j.contains("i")) m.ids = j["i"].get<std::vector<SimId>>();
    if (j.contains("s")) m.status = static_cast<CalcStatus>(j["s"].get<int>());
    if (j.contains("e")) m.error = j["e"].get<std::string>();
    m.persistent = j.value("p", false);
    m.next_id = j.value("n", SimId{0});
    if (j.contains("a")) m.assignment = assignment_from_json(j["a"]);
    return m;
}

}  // namespace dynens
