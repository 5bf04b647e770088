#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "dynens/executor.hpp"
#include "dynens/runtime/channel.hpp"

namespace dynens {

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// What a persistent user function talks to. Implemented by WorkerContext;
/// tests and offline drivers can provide their own.
class PersistentPort {
public:
    virtual ~PersistentPort() = default;
    /// Hands `points` to the manager without waiting; returns their sim_ids.
    virtual std::vector<SimId> send(Batch points) = 0;
    /// Blocks until results or a stop arrives. A stop yields an empty batch.
    virtual std::pair<MessageTag, Batch> recv() = 0;
    virtual std::pair<MessageTag, Batch> send_recv(Batch points) {
        send(std::move(points));
        return recv();
    }
    /// Asks the manager to cancel records; running ones are killed.
    virtual void request_cancel(std::vector<SimId> ids) = 0;
};

/// Worker-side settings shared by every call.
struct WorkerSetup {
    std::uint64_t base_seed = 0;
    std::filesystem::path ensemble_dir = "ensemble";
    PlatformSpec platform;
    std::map<std::string, std::filesystem::path> apps;
    nlohmann::json gen_user = nlohmann::json::object();
    nlohmann::json sim_user = nlohmann::json::object();
};

class WorkerContext;

/// Record batch in, record batch out. Simulators fill f; generators return
/// new points (sim_id -1).
using UserFn = std::function<Batch(const Batch& in, const nlohmann::json& user, WorkerContext& ctx)>;

class WorkerContext : public PersistentPort, public SignalSource {
public:
    WorkerContext(int worker_id, const WorkerSetup& setup, Channel& data, Channel& control);

    int worker_id() const noexcept { return worker_id_; }
    const WorkerSetup& setup() const noexcept { return setup_; }
    bool persistent() const noexcept { return persistent_; }
    /// True once a STOP/PERSIS_STOP has been received on the data channel.
    bool stopped() const noexcept { return stopped_; }

    std::vector<SimId> send(Batch points) override;
    std::pair<MessageTag, Batch> recv() override;
    void request_cancel(std::vector<SimId> ids) override;

    /// Drains pending control messages. KILLs for records this worker is not
    /// evaluating are dropped.
    std::vector<ManagerSignal> manager_poll() override;

    Executor& executor() { return *executor_; }
    /// Platform and assignment of the current call, with sim_dir() as workdir.
    LaunchContext launch();
    const Assignment& assignment() const noexcept { return launch_.assignment; }
    /// ensemble_dir/worker<k>/sim<id> for the current record, created on first use.
    const std::filesystem::path& sim_dir();
    /// Generator stream during generator calls, this worker's simulation
    /// stream otherwise. A persistent generator's stream is seeded with the
    /// base seed; one-shot calls reseed from (base seed, first new sim_id).
    std::mt19937_64& rng() { return in_gen_ ? gen_rng_ : sim_rng_; }
    const std::vector<SimId>& current_ids() const noexcept { return current_ids_; }

    /// Lets a simulator report that its evaluation was killed or failed.
    void set_calc_status(CalcStatus s) { status_ = s; }
    /// Message the manager logs as a warning with this call's results.
    void note(std::string message) { note_ = std::move(message); }

private:
    friend void worker_loop(WorkerContext&, const UserFn&, const UserFn&);

    int worker_id_;
    const WorkerSetup& setup_;
    Channel& data_;
    Channel& control_;
    std::unique_ptr<Executor> executor_;
    LaunchContext launch_;
    std::mt19937_64 gen_rng_;
    std::mt19937_64 sim_rng_;
    bool in_gen_ = false;
    bool persistent_ = false;
    bool stopped_ = false;
    SimId next_id_ = 0;
    std::vector<SimId> current_ids_;
    std::filesystem::path sim_dir_;
    CalcStatus status_ = CalcStatus::ok;
    std::string note_;
};

/// Serves work from the data channel until STOP. Exceptions from user
/// functions are reported as failed results.
void worker_loop(WorkerContext& ctx, const UserFn& gen_fn, const UserFn& sim_fn);

}  // namespace dynens
