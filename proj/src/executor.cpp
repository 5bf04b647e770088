#include "dynens/executor.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

namespace dynens {

namespace {

std::vector<std::string> tokenize(const std::string& s) {
    std::istringstream ss(s);
    std::vector<std::string> out;
    for (std::string tok; ss >> tok;) out.push_back(tok);
    return out;
}

std::string join_ids(const std::vector<int>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
    return out;
}

std::string resolve_on_path(const std::string& exe) {
    if (exe.find('/') != std::string::npos) return exe;
    const char* path = std::getenv("PATH");
    if (!path) return exe;
    std::string_view p(path);
    std::size_t start = 0;
    while (start <= p.size()) {
        auto colon = p.find(':', start);
        if (colon == std::string_view::npos) colon = p.size();
        std::filesystem::path dir(std::string(p.substr(start, colon - start)));
        auto cand = (dir.empty() ? std::filesystem::path(".") : dir) / exe;
        if (::access(cand.c_str(), X_OK) == 0) return cand.string();
        start = colon + 1;
    }
    return exe;
}

void sleep_seconds(double s) {
    if (s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(s));
}

}  // namespace

double wall_seconds() {
    using namespace std::chrono;
    return duration<double>(system_clock::now().time_since_epoch()).count();
}

std::string_view to_string(TaskState s) {
    switch (s) {
        case TaskState::CREATED: return "CREATED";
        case TaskState::RUNNING: return "RUNNING";
        case TaskState::FINISHED: return "FINISHED";
        case TaskState::FAILED: return "FAILED";
        case TaskState::USER_KILLED: return "USER_KILLED";
    }
    return "?";
}

std::string_view to_string(PollOutcome o) {
    switch (o) {
        case PollOutcome::FINISHED: return "FINISHED";
        case PollOutcome::FAILED: return "FAILED";
        case PollOutcome::KILLED_ON_SIGNAL: return "KILLED_ON_SIGNAL";
        case PollOutcome::KILLED_ON_TIMEOUT: return "KILLED_ON_TIMEOUT";
    }
    return "?";
}

RunLine build_runline(const PlatformSpec& platform, const Assignment& assignment, const SubmitSpec& spec,
                      const std::string& app_path) {
    const int nodes = std::max<int>(1, static_cast<int>(assignment.num_nodes()));
    const bool wants_gpus = spec.auto_assign_gpus || spec.request.num_gpus.value_or(0) > 0;
    const int gpus_per_node = wants_gpus ? assignment.gpus_per_node() : 0;

    int procs = 1;
    if (spec.match_procs_to_gpus) {
        procs = assignment.total_gpus;
        if (procs < 1) throw ExecutorError("match_procs_to_gpus with no GPUs assigned");
    } else if (spec.request.num_procs) {
        procs = *spec.request.num_procs;
    } else if (spec.request.num_nodes && spec.request.procs_per_node) {
        procs = *spec.request.num_nodes * *spec.request.procs_per_node;
    } else if (assignment.total_procs > 0) {
        procs = assignment.total_procs;
    }
    const int ppn = spec.request.procs_per_node && !spec.match_procs_to_gpus ? *spec.request.procs_per_node
                                                                              : (procs + nodes - 1) / nodes;

    // Device ids every node will see; env-based settings need them uniform.
    std::string device_ids;
    if (gpus_per_node > 0) {
        const auto& first = assignment.nodes.front().gpu_ids;
        for (const auto& n : assignment.nodes) {
            if (n.gpu_ids != first) {
                if (spec.bypass_runner || platform.gpu_setting_type != GpuSettingType::option_gpus_per_node) {
                    bool env_mode = spec.bypass_runner || platform.gpu_setting_type == GpuSettingType::env ||
                                    platform.mpi_runner != MpiRunner::srun;
                    if (env_mode)
                        throw ExecutorError("GPU ids differ across nodes; an environment-variable GPU setting "
                                            "needs matching slots");
                }
            }
        }
        device_ids = join_ids(first);
    }

    RunLine rl;
    const auto p = std::to_string(procs);
    const auto n = std::to_string(nodes);
    const auto pn = std::to_string(ppn);
    const auto g = std::to_string(gpus_per_node);

    if (spec.bypass_runner) {
        if (gpus_per_node > 0) {
            std::string var = "CUDA_VISIBLE_DEVICES";
            if (platform.gpu_env_fallback) {
                var = *platform.gpu_env_fallback;
            } else if (platform.gpu_setting_type == GpuSettingType::env) {
                var = platform.gpu_setting_name;
            }
            rl.env[var] = device_ids;
        }
    } else {
        const auto& runner = platform.runner_name;
        switch (platform.mpi_runner) {
            case MpiRunner::mpich: rl.argv = {runner, "-n", p, "--ppn", pn}; break;
            case MpiRunner::openmpi: rl.argv = {runner, "-np", p, "--npernode", pn}; break;
            case MpiRunner::srun: rl.argv = {runner, "-n", p, "--nodes", n, "--ntasks-per-node", pn}; break;
            case MpiRunner::aprun: rl.argv = {runner, "-n", p, "-N", pn}; break;
            case MpiRunner::jsrun: rl.argv = {runner, "-n", p}; break;
        }
        if (gpus_per_node > 0) {
            switch (platform.gpu_setting_type) {
                case GpuSettingType::env: rl.env[platform.gpu_setting_name] = device_ids; break;
                case GpuSettingType::runner_default:
                    if (platform.mpi_runner == MpiRunner::srun) {
                        rl.argv.insert(rl.argv.end(), {"--gpus-per-node", g});
                    } else {
                        rl.env[platform.gpu_env_fallback.value_or("CUDA_VISIBLE_DEVICES")] = device_ids;
                    }
                    break;
                case GpuSettingType::option_gpus_per_node:
                    rl.argv.insert(rl.argv.end(), {platform.gpu_setting_name, g});
                    break;
            }
        }
        if (spec.extra_args) {
            auto extra = tokenize(*spec.extra_args);
            rl.argv.insert(rl.argv.end(), extra.begin(), extra.end());
        }
    }

    rl.argv.push_back(app_path);
    auto args = tokenize(spec.app_args);
    rl.argv.insert(rl.argv.end(), args.begin(), args.end());
    return rl;
}

Task::Task(int id, RunLine run, std::filesystem::path workdir)
    : id_(id), run_(std::move(run)), workdir_(std::move(workdir)), submit_time_(wall_seconds()) {}

Task::~Task() {
    if (state_ == TaskState::RUNNING) kill(0.0);
}

double Task::runtime() const { return end_time_.value_or(wall_seconds()) - submit_time_; }

void Task::require_started(const char* op) const {
    if (dry_run_ || (state_ == TaskState::CREATED))
        throw ExecutorError(std::string(op) + " on task " + name() + " that was never started");
}

void Task::finish(TaskState s, int code) {
    state_ = s;
    return_code_ = code;
    end_time_ = wall_seconds();
}

void Task::start(const std::optional<std::filesystem::path>& env_script) {
    std::filesystem::create_directories(workdir_);
    workdir_ = std::filesystem::absolute(workdir_);

    std::vector<std::string> argv = run_.argv;
    if (env_script) {
        auto wrapper = workdir_ / (name() + "_env.sh");
        std::ofstream w(wrapper, std::ios::trunc);
        w << "#!/bin/bash\n"
          << "source '" << std::filesystem::absolute(*env_script).string() << "' || exit 1\n"
          << "exec \"$@\"\n";
        w.close();
        argv.insert(argv.begin(), {"/bin/bash", wrapper.string()});
    }
    argv[0] = resolve_on_path(argv[0]);

    // Everything the child touches is prepared before fork.
    std::map<std::string, std::string> env;
    for (char** e = environ; e && *e; ++e) {
        std::string_view kv(*e);
        auto eq = kv.find('=');
        if (eq != std::string_view::npos) env[std::string(kv.substr(0, eq))] = std::string(kv.substr(eq + 1));
    }
    for (const auto& [k, v] : run_.env) env[k] = v;
    std::vector<std::string> env_strings;
    for (const auto& [k, v] : env) env_strings.push_back(k + "=" + v);
    std::vector<char*> envp, cargv;
    for (auto& s : env_strings) envp.push_back(s.data());
    envp.push_back(nullptr);
    for (auto& s : argv) cargv.push_back(s.data());
    cargv.push_back(nullptr);
    const std::string out_path = stdout_path().string();
    const std::string err_path = stderr_path().string();
    const std::string dir = workdir_.string();

    int status_pipe[2];
    if (::pipe2(status_pipe, O_CLOEXEC) != 0) {
        diagnostic_ = std::string("pipe: ") + std::strerror(errno);
        finish(TaskState::FAILED, -1);
        return;
    }

    pid_t pid = ::fork();
    if (pid < 0) {
        diagnostic_ = std::string("fork: ") + std::strerror(errno);
        ::close(status_pipe[0]);
        ::close(status_pipe[1]);
        finish(TaskState::FAILED, -1);
        return;
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        int err = 0;
        if (::chdir(dir.c_str()) != 0) err = errno;
        int out = err ? -1 : ::open(out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        int errf = err ? -1 : ::open(err_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (!err && (out < 0 || errf < 0)) err = errno;
        if (!err) {
            ::dup2(out, STDOUT_FILENO);
            ::dup2(errf, STDERR_FILENO);
            ::execve(cargv[0], cargv.data(), envp.data());
            err = errno;
        }
        [[maybe_unused]] auto w = ::write(status_pipe[1], &err, sizeof(err));
        ::_exit(127);
    }

    ::setpgid(pid, pid);
    ::close(status_pipe[1]);
    int child_errno = 0;
    ssize_t got;
    do {
        got = ::read(status_pipe[0], &child_errno, sizeof(child_errno));
    } while (got < 0 && errno == EINTR);
    ::close(status_pipe[0]);

    pid_ = pid;
    state_ = TaskState::RUNNING;
    if (got == static_cast<ssize_t>(sizeof(child_errno))) {
        diagnostic_ = "cannot execute " + argv[0] + ": " + std::strerror(child_errno);
        int status = 0;
        ::waitpid(pid, &status, 0);
        pid_ = -1;
        finish(TaskState::FAILED, 127);
    }
}

TaskState Task::poll() {
    if (state_ != TaskState::RUNNING) return state_;
    int status = 0;
    pid_t r = ::waitpid(pid_, &status, WNOHANG);
    if (r == 0) return state_;
    if (r < 0) {
        diagnostic_ = std::string("waitpid: ") + std::strerror(errno);
        finish(TaskState::FAILED, -1);
        return state_;
    }
    pid_ = -1;
    if (WIFEXITED(status)) {
        int code = WEXITSTATUS(status);
        finish(kill_requested_ ? TaskState::USER_KILLED : (code == 0 ? TaskState::FINISHED : TaskState::FAILED), code);
    } else {
        int code = 128 + WTERMSIG(status);
        finish(kill_requested_ ? TaskState::USER_KILLED : TaskState::FAILED, code);
    }
    return state_;
}

TaskState Task::wait(std::optional<double> timeout) {
    require_started("wait");
    const double start = wall_seconds();
    double nap = 0.002;
    while (poll() == TaskState::RUNNING) {
        if (timeout) {
            double left = *timeout - (wall_seconds() - start);
            if (left <= 0) break;
            nap = std::min(nap, left);
        }
        sleep_seconds(nap);
        nap = std::min(nap * 2, 0.05);
    }
    return state_;
}

void Task::kill(double grace) {
    require_started("kill");
    if (poll() != TaskState::RUNNING) return;
    kill_requested_ = true;
    ::kill(-pid_, SIGTERM);
    const double deadline = wall_seconds() + grace;
    while (poll() == TaskState::RUNNING && wall_seconds() < deadline) sleep_seconds(0.005);
    if (state_ == TaskState::RUNNING) {
        ::kill(-pid_, SIGKILL);
        int status = 0;
        ::waitpid(pid_, &status, 0);
        pid_ = -1;
        finish(TaskState::USER_KILLED, 128 + SIGKILL);
    }
}

Executor::~Executor() {
    for (auto& t : tasks_)
        if (t->state() == TaskState::RUNNING) t->kill(0.0);
}

void Executor::register_app(const std::filesystem::path& full_path, const std::string& app_name) {
    if (app_name.empty()) throw ExecutorError("empty app name");
    if (apps_.count(app_name)) throw ExecutorError("app '" + app_name + "' already registered");
    apps_.emplace(app_name, AppRegistration{app_name, full_path});
}

Task& Executor::submit(const SubmitSpec& spec, const LaunchContext& ctx) {
    auto it = apps_.find(spec.app_name);
    if (it == apps_.end()) throw ExecutorError("app '" + spec.app_name + "' is not registered");
    if (spec.auto_assign_gpus && spec.request.num_gpus)
        throw ExecutorError("auto_assign_gpus cannot be combined with an explicit num_gpus");

    const auto& app_path = it->second.full_path;
    auto run = build_runline(ctx.platform, ctx.assignment, spec, app_path.string());
    auto task = std::unique_ptr<Task>(new Task(next_id_++, std::move(run), ctx.workdir));
    task->dry_run_ = spec.dry_run;

    if (!spec.dry_run) {
        std::error_code ec;
        if (!std::filesystem::exists(app_path, ec)) {
            task->diagnostic_ = "application '" + spec.app_name + "' not found at " + app_path.string();
            task->state_ = TaskState::RUNNING;
            task->finish(TaskState::FAILED, 127);
        } else {
            task->start(spec.env_script);
        }
    }
    tasks_.push_back(std::move(task));
    return *tasks_.back();
}

PollOutcome polling_loop(Task& task, SignalSource& signals, const PollingOptions& options) {
    const double interval = std::max(options.poll_interval, 0.001);
    while (true) {
        auto s = task.poll();
        if (s == TaskState::FINISHED) return PollOutcome::FINISHED;
        if (s == TaskState::FAILED) return PollOutcome::FAILED;
        if (s == TaskState::USER_KILLED) return PollOutcome::KILLED_ON_SIGNAL;
        if (s == TaskState::CREATED) throw ExecutorError("polling_loop on a task that was never started");

        for (const auto& sig : signals.manager_poll()) {
            (void)sig;
            task.kill(options.kill_grace);
            return PollOutcome::KILLED_ON_SIGNAL;
        }
        if (options.timeout && task.runtime() >= *options.timeout) {
            task.kill(options.kill_grace);
            return PollOutcome::KILLED_ON_TIMEOUT;
        }
        // Sleep in short steps so a fast exit is noticed before the full interval.
        double left = interval;
        if (options.timeout) left = std::min(left, std::max(0.0, *options.timeout - task.runtime()));
        const double until = wall_seconds() + left;
        while (wall_seconds() < until) {
            if (task.poll() != TaskState::RUNNING) break;
            sleep_seconds(std::min(0.01, until - wall_seconds()));
        }
    }
}

}  // namespace dynens
