#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dynens/history.hpp"
#include "dynens/resources/scheduler.hpp"

namespace dynens {

enum class MessageTag { EVAL_GEN, EVAL_SIM, STOP, PERSIS_STOP, FINISHED_PERSISTENT_GEN, RESULT, KILL };
std::string_view to_string(MessageTag t);

inline bool is_stop(MessageTag t) { return t == MessageTag::STOP || t == MessageTag::PERSIS_STOP; }

/// Outcome of one user-function call, as reported by the worker.
enum class CalcStatus { ok, failed, killed };
std::string_view to_string(CalcStatus s);

/// A record as seen by user functions. sim_id is -1 for points a generator
/// has not submitted yet.
struct Point {
    SimId sim_id = -1;
    std::vector<double> x;
    double f = kNaN;
    double priority = 0.0;
    int num_procs = 0;
    int num_gpus = 0;

    bool operator==(const Point& o) const;
};

using Batch = std::vector<Point>;

Point to_point(const EnsembleRecord& r);

struct Message {
    MessageTag tag = MessageTag::STOP;
    Batch batch;
    /// Cancel requests from a generator; the target of a KILL.
    std::vector<SimId> ids;
    CalcStatus status = CalcStatus::ok;
    std::string error;
    bool persistent = false;
    /// First sim_id a persistent generator will be given.
    SimId next_id = 0;
    std::optional<Assignment> assignment;
};

nlohmann::json to_json(const Assignment& a);
Assignment assignment_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> encode(const Message& m);
Message decode(const std::vector<std::uint8_t>& bytes);

}  // namespace dynens
