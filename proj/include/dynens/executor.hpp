#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <sys/types.h>

#include "dynens/history.hpp"
#include "dynens/resources.hpp"

namespace dynens {

class ExecutorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AppRegistration {
    std::string app_name;
    std::filesystem::path full_path;
};

struct SubmitSpec {
    std::string app_name;
    std::string app_args;
    ResourceRequest request;
    /// Use every GPU of the worker's assignment.
    bool auto_assign_gpus = false;
    /// One MPI rank per assigned GPU.
    bool match_procs_to_gpus = false;
    std::optional<std::string> extra_args;
    /// Sourced by a wrapper shell in the child before the launch line runs.
    std::optional<std::filesystem::path> env_script;
    bool dry_run = false;
    /// Launch the application without the MPI runner.
    bool bypass_runner = false;
};

struct RunLine {
    std::vector<std::string> argv;
    std::map<std::string, std::string> env;

    bool operator==(const RunLine&) const = default;
};

/// Builds the launch argv and environment additions. Pure.
///
/// Runner grammar (P procs, N nodes, PPN procs per node, runner = platform.runner_name):
///   mpich   : runner -n P --ppn PPN
///   openmpi : runner -np P --npernode PPN
///   srun    : runner -n P --nodes N --ntasks-per-node PPN
///   aprun   : runner -n P -N PPN
///   jsrun   : runner -n P
/// followed by GPU options, extra_args, the application path and its arguments.
///
/// GPUs (G per node, device ids per node): env sets gpu_setting_name to the
/// comma-joined ids (ids must agree across nodes); runner_default appends
/// "--gpus-per-node G" under srun and otherwise sets the fallback variable
/// (CUDA_VISIBLE_DEVICES when none is defined); option_gpus_per_node appends
/// "gpu_setting_name G". With bypass_runner the ids go to gpu_env_fallback,
/// else gpu_setting_name for env platforms, else CUDA_VISIBLE_DEVICES.
RunLine build_runline(const PlatformSpec& platform, const Assignment& assignment, const SubmitSpec& spec,
                      const std::string& app_path);

enum class TaskState { CREATED, RUNNING, FINISHED, FAILED, USER_KILLED };
std::string_view to_string(TaskState s);
inline bool is_terminal(TaskState s) { return s != TaskState::CREATED && s != TaskState::RUNNING; }

/// One launched (or dry-run) application instance. Owned by its Executor.
class Task {
public:
    Task(const Task&) = delete;
    Task& operator=(const Task&) = delete;
    ~Task();

    int id() const noexcept { return id_; }
    std::string name() const { return "task_" + std::to_string(id_); }
    TaskState state() const noexcept { return state_; }
    std::optional<int> return_code() const noexcept { return return_code_; }
    const std::vector<std::string>& launch_line() const noexcept { return run_.argv; }
    const std::map<std::string, std::string>& env_additions() const noexcept { return run_.env; }
    const std::filesystem::path& workdir() const noexcept { return workdir_; }
    std::filesystem::path stdout_path() const { return workdir_ / (name() + ".out"); }
    std::filesystem::path stderr_path() const { return workdir_ / (name() + ".err"); }
    const std::string& diagnostic() const noexcept { return diagnostic_; }
    double submit_time() const noexcept { return submit_time_; }
    std::optional<double> end_time() const noexcept { return end_time_; }
    /// Seconds since submission (to end_time once terminal).
    double runtime() const;

    /// Non-blocking state refresh.
    TaskState poll();
    /// Blocks until terminal or until `timeout` seconds elapse.
    TaskState wait(std::optional<double> timeout = std::nullopt);
    /// SIGTERM to the task's process group, SIGKILL after `grace` seconds.
    void kill(double grace = 2.0);

private:
    friend class Executor;
    Task(int id, RunLine run, std::filesystem::path workdir);
    void start(const std::optional<std::filesystem::path>& env_script);
    void finish(TaskState s, int code);
    void require_started(const char* op) const;

    int id_;
    RunLine run_;
    std::filesystem::path workdir_;
    TaskState state_ = TaskState::CREATED;
    std::optional<int> return_code_;
    std::string diagnostic_;
    pid_t pid_ = -1;
    bool dry_run_ = false;
    bool kill_requested_ = false;
    double submit_time_ = 0.0;
    std::optional<double> end_time_;
};

/// Where a submission runs: the worker's platform, its resources and directory.
struct LaunchContext {
    PlatformSpec platform;
    Assignment assignment;
    std::filesystem::path workdir = ".";
};

class Executor {
public:
    Executor() = default;
    Executor(const Executor&) = delete;
    Executor& operator=(const Executor&) = delete;
    /// Kills any task still running.
    ~Executor();

    void register_app(const std::filesystem::path& full_path, const std::string& app_name);
    bool has_app(const std::string& app_name) const { return apps_.count(app_name) > 0; }
    const std::map<std::string, AppRegistration>& apps() const noexcept { return apps_; }

    /// Dry runs come back CREATED with the launch line filled in. Live runs
    /// come back RUNNING, or FAILED when the process could not be started.
    Task& submit(const SubmitSpec& spec, const LaunchContext& ctx);

    const std::vector<std::unique_ptr<Task>>& tasks() const noexcept { return tasks_; }

private:
    std::map<std::string, AppRegistration> apps_;
    std::vector<std::unique_ptr<Task>> tasks_;
    int next_id_ = 0;
};

struct ManagerSignal {
    enum class Kind { STOP, KILL };
    Kind kind = Kind::STOP;
    SimId sim_id = -1;

    bool operator==(const ManagerSignal&) const = default;
};

/// Something that can be asked, without blocking, for pending manager signals.
class SignalSource {
public:
    virtual ~SignalSource() = default;
    virtual std::vector<ManagerSignal> manager_poll() = 0;
};

enum class PollOutcome { FINISHED, FAILED, KILLED_ON_SIGNAL, KILLED_ON_TIMEOUT };
std::string_view to_string(PollOutcome o);

struct PollingOptions {
    double poll_interval = 0.5;
    /// Measured from task submission.
    std::optional<double> timeout;
    double kill_grace = 2.0;
};

/// Polls the task and the manager until the task ends, a STOP/KILL signal
/// arrives, or the timeout passes; kills the task in the latter two cases.
PollOutcome polling_loop(Task& task, SignalSource& signals, const PollingOptions& options = {});

double wall_seconds();

}  // namespace dynens
