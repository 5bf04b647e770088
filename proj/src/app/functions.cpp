#include "dynens/app/functions.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "dynens/app/objective.hpp"
#include "dynens/gp_generator.hpp"

namespace dynens {

using nlohmann::json;

Batch uniform_points(const std::vector<double>& lb, const std::vector<double>& ub, std::size_t b,
                     std::mt19937_64& rng) {
    if (lb.size() != ub.size()) throw std::invalid_argument("lb and ub lengths differ");
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Batch out(b);
    for (auto& p : out) {
        p.x.resize(lb.size());
        for (std::size_t d = 0; d < lb.size(); ++d) p.x[d] = lb[d] + (ub[d] - lb[d]) * U(rng);
    }
    return out;
}

int gpus_for(double x0, double lb0, double ub0, int max_gpus) {
    if (max_gpus < 1) throw std::invalid_argument("max_gpus must be at least 1");
    if (!(ub0 > lb0)) throw std::invalid_argument("ub[0] must exceed lb[0]");
    const double bucket = (ub0 - lb0) / max_gpus;
    const double k = std::floor((x0 - lb0) / bucket);
    if (k < 0) return 1;
    return static_cast<int>(std::min<double>(k + 1, max_gpus));
}

double euclidean_norm(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

namespace {

std::vector<double> bound(const json& user, const char* key) {
    if (!user.contains(key)) throw std::invalid_argument(std::string(key) + " is required");
    const auto& j = user.at(key);
    if (!j.is_array() || j.empty()) throw std::invalid_argument(std::string(key) + " must be a non-empty array");
    std::vector<double> v;
    for (const auto& e : j) {
        if (!e.is_number()) throw std::invalid_argument(std::string(key) + " must hold numbers");
        v.push_back(e.get<double>());
    }
    return v;
}

struct Box {
    std::vector<double> lb, ub;
    std::size_t batch = 0;
};

Box read_box(const json& user, std::size_t default_batch) {
    Box b{bound(user, "lb"), bound(user, "ub"), default_batch};
    if (b.lb.size() != b.ub.size())
        throw std::invalid_argument("lb has " + std::to_string(b.lb.size()) + " entries but ub has " +
                                    std::to_string(b.ub.size()));
    for (std::size_t d = 0; d < b.lb.size(); ++d)
        if (!(b.lb[d] < b.ub[d])) throw std::invalid_argument("lb[" + std::to_string(d) + "] must be below ub");
    const auto n = user.value("gen_batch_size", static_cast<long long>(default_batch));
    if (n < 1) throw std::invalid_argument("gen_batch_size must be positive");
    b.batch = static_cast<std::size_t>(n);
    return b;
}

// Keeps a restarted generator on the same stream as an uninterrupted one.
void skip_draws(std::mt19937_64& rng, const Batch& H_in, std::size_t dim) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (std::size_t i = 0; i < H_in.size() * dim; ++i) U(rng);
}

using Decorate = std::function<void(Point&)>;

Batch sample_loop(const Batch& H_in, const Box& box, WorkerContext& ctx, const Decorate& decorate) {
    auto make = [&](std::size_t n) {
        Batch b = uniform_points(box.lb, box.ub, n, ctx.rng());
        for (auto& p : b) decorate(p);
        return b;
    };
    if (!ctx.persistent()) return make(box.batch);
    skip_draws(ctx.rng(), H_in, box.lb.size());
    auto [tag, results] = ctx.send_recv(make(box.batch));
    while (!is_stop(tag)) {
        std::tie(tag, results) = ctx.send_recv(make(results.empty() ? box.batch : results.size()));
    }
    return {};
}

Batch gen_random_batch(const Batch& H_in, const json& user, WorkerContext& ctx) {
    return sample_loop(H_in, read_box(user, 50), ctx, [](Point&) {});
}

Batch gen_with_gpu_counts(const Batch& H_in, const json& user, WorkerContext& ctx) {
    const Box box = read_box(user, 8);
    const int max_gpus = user.value("max_gpus", 1);
    if (max_gpus < 1) throw std::invalid_argument("max_gpus must be at least 1");
    return sample_loop(H_in, box, ctx,
                       [&](Point& p) { p.num_gpus = gpus_for(p.x[0], box.lb[0], box.ub[0], max_gpus); });
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) { return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()); }

GpGenConfig gp_config(const json& user, const std::filesystem::path& ensemble_dir) {
    const Box box = read_box(user, 16);
    GpGenConfig c;
    c.lb = to_eigen(box.lb);
    c.ub = to_eigen(box.ub);
    c.batch_size = box.batch;
    c.points_per_dim = user.value("points_per_dim", 50);
    const auto mode = user.value("mode", std::string("variance"));
    if (mode == "variance") c.mode = SelectionMode::variance;
    else if (mode == "uniform") c.mode = SelectionMode::uniform;
    else throw std::invalid_argument("mode must be variance or uniform, not " + mode);
    if (user.contains("max_batches")) c.max_batches = user.at("max_batches").get<int>();
    if (user.contains("metrics_path")) {
        std::filesystem::path p = user.at("metrics_path").get<std::string>();
        c.metrics_path = p.is_relative() ? ensemble_dir / p : p;
    }
    c.policy.allow_local = user.value("allow_local", true);

    const auto seed = user.value("objective_seed", std::uint64_t{1});
    const auto n_test = user.value("test_points", 500);
    const auto target = user.value("test_objective", std::string("synthetic"));
    if (n_test < 1) throw std::invalid_argument("test_points must be positive");
    std::mt19937_64 test_rng(seed + 7919);
    c.X_test = initial_sample(c.lb, c.ub, static_cast<std::size_t>(n_test), test_rng);
    if (target == "synthetic") {
        c.y_test = SyntheticObjective(box.lb.size(), seed).evaluate(c.X_test);
    } else if (target == "norm") {
        c.y_test = c.X_test.rowwise().norm();
    } else {
        throw std::invalid_argument("test_objective must be synthetic or norm, not " + target);
    }
    return c;
}

Batch gp_online(const Batch&, const json& user, WorkerContext& ctx) {
    if (!ctx.persistent()) throw GeneratorError("gp_online runs only as a persistent generator");
    gp_gen_loop(ctx, gp_config(user, ctx.setup().ensemble_dir), ctx.rng());
    return {};
}

Batch sim_norm(const Batch& in, const json&, WorkerContext&) {
    Batch out = in;
    for (auto& p : out) p.f = euclidean_norm(p.x);
    return out;
}

Batch sim_synthetic(const Batch& in, const json& user, WorkerContext&) {
    Batch out = in;
    if (out.empty()) return out;
    const SyntheticObjective obj(out.front().x.size(), user.value("objective_seed", std::uint64_t{1}));
    for (auto& p : out) p.f = obj(p.x);
    return out;
}

// Sleeps in short slices so a kill from the manager cuts it short.
Batch sim_sleep(const Batch& in, const json& user, WorkerContext& ctx) {
    const double seconds = user.value("sleep", 0.2);
    using clock = std::chrono::steady_clock;
    const auto end = clock::now() + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(seconds));
    Batch out = in;
    while (clock::now() < end) {
        if (!ctx.manager_poll().empty()) {
            for (auto& p : out) p.f = kNaN;
            ctx.set_calc_status(CalcStatus::killed);
            return out;
        }
        std::this_thread::sleep_for(std::min<clock::duration>(end - clock::now(), std::chrono::milliseconds(10)));
    }
    for (auto& p : out) p.f = euclidean_norm(p.x);
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& a : v) s += (s.empty() ? "" : " ") + a;
    return s;
}

Batch sim_stub_app(const Batch& in, const json& user, WorkerContext& ctx) {
    const auto sp = StubParams::from_json(user);
    Batch out = in;
    for (auto& p : out) {
        SubmitSpec s;
        s.app_name = sp.app_name;
        s.app_args = sp.app_args(p);
        s.dry_run = sp.dry_run;
        s.bypass_runner = sp.bypass_runner;
        s.extra_args = sp.extra_args;
        if (ctx.assignment().total_gpus > 0) {
            s.auto_assign_gpus = true;
            s.match_procs_to_gpus = true;
        } else if (p.num_procs > 0) {
            s.request.num_procs = p.num_procs;
        }
        Task& task = ctx.executor().submit(s, ctx.launch());
        p.f = kNaN;
        if (sp.dry_run) {
            std::string env;
            for (const auto& [k, v] : task.env_additions()) env += k + "=" + v + " ";
            std::cout << "sim " << p.sim_id << ": " << env << join(task.launch_line()) << std::endl;
            continue;
        }
        if (task.state() == TaskState::FAILED) {
            ctx.note("sim " + std::to_string(p.sim_id) + ": launch failed: " + task.diagnostic());
            continue;
        }
        const auto outcome = polling_loop(task, ctx, PollingOptions{sp.poll_interval, sp.timeout, sp.kill_grace});
        if (outcome == PollOutcome::KILLED_ON_SIGNAL || outcome == PollOutcome::KILLED_ON_TIMEOUT) {
            ctx.set_calc_status(CalcStatus::killed);
            continue;
        }
        if (auto v = read_final_value(task.workdir() / "forces.stat")) {
            p.f = *v;
        } else {
            ctx.note("sim " + std::to_string(p.sim_id) + ": FAILED, no forces.stat (" +
                     std::string(to_string(outcome)) + ")");
        }
    }
    return out;
}

}  // namespace

StubParams StubParams::from_json(const json& user) {
    StubParams sp;
    sp.app_name = user.value("app_name", sp.app_name);
    sp.particles = user.value("particles", sp.particles);
    sp.particles_per_x = user.value("particles_per_x", sp.particles_per_x);
    sp.steps = user.value("steps", sp.steps);
    sp.sleep = user.value("sleep", sp.sleep);
    if (user.contains("slow_above")) sp.slow_above = user.at("slow_above").get<double>();
    sp.slow_sleep = user.value("slow_sleep", sp.slow_sleep);
    if (user.contains("timeout")) sp.timeout = user.at("timeout").get<double>();
    sp.poll_interval = user.value("poll_interval", sp.poll_interval);
    sp.kill_grace = user.value("kill_grace", sp.kill_grace);
    sp.dry_run = user.value("dry_run", sp.dry_run);
    sp.bypass_runner = user.value("bypass_runner", sp.bypass_runner);
    if (user.contains("extra_args")) sp.extra_args = user.at("extra_args").get<std::string>();
    if (sp.particles < 1) throw std::invalid_argument("particles must be positive");
    if (sp.steps < 1) throw std::invalid_argument("steps must be positive");
    if (sp.sleep < 0 || sp.slow_sleep < 0) throw std::invalid_argument("sleep must be non-negative");
    if (!(sp.poll_interval > 0)) throw std::invalid_argument("poll_interval must be positive");
    if (sp.timeout && !(*sp.timeout > 0)) throw std::invalid_argument("timeout must be positive");
    return sp;
}

std::string StubParams::app_args(const Point& p) const {
    const double x0 = p.x.empty() ? 0.0 : p.x[0];
    const int n = particles + static_cast<int>(std::lround(particles_per_x * std::abs(x0)));
    const double s = slow_above && x0 > *slow_above ? slow_sleep : sleep;
    std::ostringstream os;
    os << n << ' ' << steps;
    if (s > 0) os << ' ' << s;
    return os.str();
}

std::optional<double> read_final_value(const std::filesystem::path& stat_file) {
    std::ifstream in(stat_file);
    if (!in) return std::nullopt;
    std::optional<double> last;
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t used = 0;
            double v = std::stod(tok, &used);
            if (used == tok.size()) last = v;
        } catch (const std::exception&) {
        }
    }
    return last;
}

const std::map<std::string, UserFn>& generator_registry() {
    static const std::map<std::string, UserFn> m{
        {"gen_random_batch", gen_random_batch},
        {"gen_with_gpu_counts", gen_with_gpu_counts},
        {"gp_online", gp_online},
    };
    return m;
}

const std::map<std::string, UserFn>& simulator_registry() {
    static const std::map<std::string, UserFn> m{
        {"sim_norm", sim_norm},
        {"sim_synthetic", sim_synthetic},
        {"sim_sleep", sim_sleep},
        {"sim_stub_app", sim_stub_app},
    };
    return m;
}

const std::map<std::string, AllocFn>& allocator_registry() {
    static const std::map<std::string, AllocFn> m{
        {"give_sim_work_first", default_alloc},
        {"only_persistent_gens", persistent_alloc},
    };
    return m;
}

void check_user_params(const std::string& fn_name, const json& user) {
    try {
        if (fn_name == "gen_random_batch") {
            read_box(user, 50);
        } else if (fn_name == "gen_with_gpu_counts") {
            read_box(user, 8);
            if (user.value("max_gpus", 1) < 1) throw std::invalid_argument("max_gpus must be at least 1");
        } else if (fn_name == "gp_online") {
            const auto c = gp_config(user, ".");
            SelectionParams::defaults(c.lb, c.ub, c.batch_size).validate();
            if (c.points_per_dim < 2) throw std::invalid_argument("points_per_dim must be at least 2");
            if (c.max_batches && *c.max_batches < 1) throw std::invalid_argument("max_batches must be positive");
        } else if (fn_name == "sim_stub_app") {
            StubParams::from_json(user);
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("wrong type: ") + e.what());
    }
}

bool requires_persistent(const std::string& gen_name) { return gen_name == "gp_online"; }

}  // namespace dynens
