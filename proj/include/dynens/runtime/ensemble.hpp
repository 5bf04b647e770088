#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynens/history.hpp"
#include "dynens/runtime/alloc.hpp"
#include "dynens/runtime/worker.hpp"

namespace dynens {

struct StopValue {
    /// Only "f" is recognised.
    std::string field = "f";
    /// Fires once a returned value is <= threshold.
    double threshold = 0.0;
};

struct ExitCriteria {
    std::optional<std::size_t> sim_max;
    std::optional<std::size_t> gen_max;
    std::optional<double> wallclock_max;
    std::optional<StopValue> stop_val;

    bool any() const { return sim_max || gen_max || wallclock_max || stop_val; }
};

enum class CompletionFlag { SIM_MAX, GEN_MAX, WALLCLOCK, STOP_VAL, GEN_FINISHED, STALLED };
std::string_view to_string(CompletionFlag f);

/// `elapsed` is seconds since the ensemble started.
std::optional<CompletionFlag> check_exit(const History& h, double elapsed, const ExitCriteria& c);

enum class CommsMode { local, gen_on_manager };
std::string_view to_string(CommsMode m);
CommsMode parse_comms_mode(std::string_view s);

struct RuntimeConfig {
    /// local: processes 1..nworkers, any of which may generate.
    /// gen_on_manager: simulation processes 1..nworkers plus a generator
    /// thread in the manager as worker 0.
    int nworkers = 1;
    CommsMode comms = CommsMode::local;
    ExitCriteria exit;
    /// Length of x.
    std::size_t dim = 0;
    WorkerSetup worker;

    /// Resource sets are built only when an inventory is given.
    std::optional<NodeInventory> inventory;
    ScheduleOptions schedule;
    ResourceSetOptions rset_options;

    /// In local mode one worker hosts a persistent generator and takes no resource set.
    bool dedicated_gen_worker = false;
    bool async_return = false;
    std::optional<std::filesystem::path> dump_path;
    std::size_t dump_every = 50;
    bool abort_on_exception = true;
    bool kill_canceled_sims = true;
    /// Record the dispatch/result trace in the outcome.
    bool record_trace = false;
    /// Seconds to wait for workers after STOP before killing them.
    double shutdown_timeout = 30.0;
};

struct TraceEvent {
    enum class Kind { DISPATCH_SIM, RESULT_SIM, DISPATCH_GEN, GEN_POINTS, FORWARD, KILL, STOP };
    Kind kind;
    int worker;
    std::vector<SimId> ids;
};

struct RunOutcome {
    History history;
    CompletionFlag flag = CompletionFlag::STALLED;
    std::vector<TraceEvent> trace;
    std::vector<std::string> warnings;
    double elapsed = 0.0;
};

class EnsembleError : public std::runtime_error {
public:
    EnsembleError(int worker, const std::string& what)
        : std::runtime_error("worker " + std::to_string(worker) + ": " + what), worker_(worker) {}
    int worker() const noexcept { return worker_; }

private:
    int worker_;
};

/// Runs the manager loop until an exit criterion fires or generation ends.
/// Throws EnsembleError (after dumping the history) when a user function
/// fails under abort_on_exception, or when a worker dies.
RunOutcome run_ensemble(const RuntimeConfig& config, const UserFn& gen_fn, const UserFn& sim_fn,
                        const AllocFn& alloc_fn, std::optional<History> H0 = std::nullopt);

}  // namespace dynens
