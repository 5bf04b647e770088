// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynens/app/config.hpp"
#include "dynens/app/functions.hpp"
#include "dynens/app/objective.hpp"
#include "dynens/executor.hpp"
#include "dynens/gp_generator.hpp"
#include "dynens/resources.hpp"
#include "dynens/runtime.hpp"
#include "dynens/surrogate.hpp"
#include "golden_cases.hpp"
#include "scheduler_oracle.hpp"
#include "test_util.hpp"

using namespace dynens;
using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
    std::ostringstream ss;
    ss.precision(precision);
    ss << v;
    return ss.str();
}

Verdict scheduler_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1000);
    int placed = 0, unplaceable = 0, bad = 0;
    std::string first_problem;
    for (int i = 0; i < 1000; ++i) {
        PlatformSpec p;
        auto c = oracle::random_case(rng, p);
        ScheduleOptions o;
        o.match_slots = rng() % 2 == 0;
        o.split2fit = rng() % 4 != 0;
        const auto before = c.rsets;
        const auto exp = oracle::expect(c.request, c.rsets, *o.match_slots, o.split2fit);
        const auto a = schedule(c.request, c.rsets, p, o);
        std::string problem;
        if (!exp.nodes) {
            if (a) problem = "placed a request the oracle cannot place";
            else if (c.rsets != before) problem = "failed placement changed the resource sets";
            else ++unplaceable;
        } else if (!a) {
            problem = "missed a placement the oracle found";
        } else if (static_cast<int>(a->num_nodes()) != *exp.nodes) {
            problem = "used " + std::to_string(a->num_nodes()) + " nodes, minimum is " + std::to_string(*exp.nodes);
        } else {
            problem = oracle::violations(c.request, *a, before, exp, *o.match_slots);
            if (problem.empty()) ++placed;
        }
        if (!problem.empty()) {
            if (bad++ == 0) first_problem = "case " + std::to_string(i) + ": " + problem;
        }
    }
    const double took = seconds_since(t0);
    Verdict v;
    v.pass = bad == 0 && took < 30.0;
    v.detail = "1000 cases, " + std::to_string(placed) + " placed, " + std::to_string(unplaceable) +
               " unplaceable, " + std::to_string(bad) + " mismatches, " + fmt(took) + " s";
    if (!first_problem.empty()) v.detail += "; " + first_problem;
    return v;
}

Verdict golden_runlines() {
    using namespace golden;
    const json cases = json::parse(slurp(kGolden / "cases.json"));
    int matched = 0, matrix = 0, presets = 0;
    std::vector<std::string> failed;
    for (const auto& c : cases) {
        const std::string name = c["name"];
        const auto want = slurp(kGolden / (name + ".json"));
        const auto got = serialise(build_runline(platform_from(c), assignment_from(c["assignment"]), spec_from(c["spec"]),
                                                 c["app"]));
        if (!want.empty() && got == want) {
            ++matched;
            if (name.find("__") != std::string::npos) ++matrix;
            if (name == "preset_frontier" || name == "preset_aurora") ++presets;
        } else {
            failed.push_back(name);
        }
    }
    const auto frontier = detect_platform({}, {}, "frontier");
    const auto aurora = detect_platform({}, {}, "aurora");
    const bool constants = frontier.gpus_per_node == 8 && aurora.cores_per_node == 104;
    Verdict v;
    v.pass = failed.empty() && matrix == 15 && presets == 2 && constants;
    v.detail = std::to_string(matched) + "/" + std::to_string(cases.size()) + " golden files, " +
               std::to_string(matrix) + "/15 runner x gpu setting combos, " + std::to_string(presets) +
               "/2 presets, frontier gpus_per_node " + std::to_string(frontier.gpus_per_node) +
               ", aurora cores_per_node " + std::to_string(aurora.cores_per_node);
    for (const auto& n : failed) v.detail += "; mismatch " + n;
    return v;
}

Verdict gp_numerics() {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    double interp_err = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 1 + trial % 5;
        const int m = 5 + (3 * trial) % 16;
        GPModel g(n, 1e-12);
        g.set_hyperparams({uniform(0.5, 2.0), VectorXd::Constant(n, uniform(0.3, 1.0))});
        MatrixXd X(m, n);
        for (int i = 0; i < m; ++i)
            for (int d = 0; d < n; ++d) X(i, d) = u(rng);
        VectorXd y(m);
        for (int i = 0; i < m; ++i) y(i) = std::sin(4 * X(i, 0)) + X.row(i).sum();
        g.tell(X, y);
        interp_err = std::max(interp_err, (g.posterior(X).mean - y).cwiseAbs().maxCoeff());
    }

    double worst_rel = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + trial % 5;
        const int m = 2 + static_cast<int>(rng() % 19);
        GPModel g(n, uniform(1e-3, 1e-1));
        MatrixXd X(m, n);
        for (int i = 0; i < m; ++i)
            for (int d = 0; d < n; ++d) X(i, d) = u(rng);
        VectorXd y(m);
        for (int i = 0; i < m; ++i) y(i) = std::cos(3 * X(i, 0)) + uniform(-0.2, 0.2);
        g.tell(X, y);
        Hyperparams hp{uniform(0.3, 3.0), VectorXd(n)};
        for (int d = 0; d < n; ++d) hp.lengthscales(d) = uniform(0.2, 2.0);
        VectorXd grad;
        g.log_marginal_likelihood(hp, &grad);
        const double h = 1e-5;
        for (int k = 0; k <= n; ++k) {
            auto at = [&](double delta) {
                Hyperparams p = hp;
                if (k == 0)
                    p.signal_variance *= std::exp(delta);
                else
                    p.lengthscales(k - 1) *= std::exp(delta);
                return g.log_marginal_likelihood(p);
            };
            const double fd = (at(h) - at(-h)) / (2 * h);
            worst_rel = std::max(worst_rel, std::abs(grad(k) - fd) / std::max(std::abs(fd), 1e-300));
        }
    }

    GPModel one(1, 0.0);
    one.set_hyperparams({1.0, VectorXd::Ones(1)});
    one.tell(MatrixXd::Zero(1, 1), VectorXd::Ones(1));
    const auto p = one.posterior(MatrixXd::Ones(1, 1));
    auto five = [](double v) { return std::round(v * 1e5) / 1e5; };
    const bool closed = five(p.mean(0)) == 0.60653 && five(p.variance(0)) == 0.63212;

    Verdict v;
    v.pass = interp_err <= 1e-6 && worst_rel < 1e-4 && closed;
    v.detail = "(a) max interpolation error " + fmt(interp_err) + ", (b) worst gradient relative error " +
               fmt(worst_rel) + " over 50 instances, (c) mean " + fmt(p.mean(0), 8) + " variance " +
               fmt(p.variance(0), 8);
    return v;
}

Verdict training_policy() {
    const double eps = 1e-9;
    const std::vector<std::pair<double, TrainMethod>> table{
        {0.0, TrainMethod::local()},          {1.9, TrainMethod::local()},
        {2.0 + eps, TrainMethod::global(20)}, {5.0, TrainMethod::global(20)},
        {9.9, TrainMethod::global(20)},       {10.0 + eps, TrainMethod::global(120)},
        {100.0, TrainMethod::global(120)},
    };
    const TrainingPolicy policy;
    int ok = 0;
    std::string got;
    for (double std_y : {1.0, 0.37}) {
        for (const auto& [ratio, want] : table) {
            const auto m = decide_training(ratio * std_y, std_y, policy);
            if (m == want) ++ok;
            if (std_y == 1.0) got += (got.empty() ? "" : " ") + m.to_string();
        }
    }
    const bool boundaries = decide_training(2.0, 1.0, policy) == TrainMethod::local() &&
                            decide_training(10.0, 1.0, policy) == TrainMethod::global(20);
    Verdict v;
    v.pass = ok == 14 && boundaries;
    v.detail = std::to_string(ok) + "/14 ratios match: " + got +
               (boundaries ? "; exact thresholds stay below" : "; exact threshold mismatch");
    return v;
}

struct OfflinePort : PersistentPort {
    const SyntheticObjective* objective = nullptr;
    SimId next = 0;
    Batch pending;

    std::vector<SimId> send(Batch points) override {
        std::vector<SimId> ids;
        for (auto& p : points) ids.push_back(p.sim_id = next++);
        pending = std::move(points);
        return ids;
    }
    std::pair<MessageTag, Batch> recv() override {
        Batch out = pending;
        for (auto& p : out) p.f = (*objective)(p.x);
        return {MessageTag::RESULT, out};
    }
    void request_cancel(std::vector<SimId>) override {}
};

Verdict online_learning() {
    const auto t0 = Clock::now();
    int wins = 0, variance_drops = 0;
    std::string mse_pairs;
    for (int trial = 0; trial < 10; ++trial) {
        const SyntheticObjective objective(2, 100 + trial);
        GpGenConfig c;
        c.lb = VectorXd::Zero(2);
        c.ub = VectorXd::Ones(2);
        c.batch_size = 16;
        c.points_per_dim = 50;
        c.max_batches = 10;
        std::mt19937_64 test_rng(999 + trial);
        c.X_test = initial_sample(c.lb, c.ub, 500, test_rng);
        c.y_test = objective.evaluate(c.X_test);

        auto run = [&](SelectionMode mode) {
            c.mode = mode;
            OfflinePort port;
            port.objective = &objective;
            std::mt19937_64 rng(trial);
            return gp_gen_loop(port, c, rng).rows;
        };
        const auto online = run(SelectionMode::variance);
        const auto uniform = run(SelectionMode::uniform);
        if (online.size() != 10 || uniform.size() != 10) throw std::runtime_error("expected 10 metrics rows per run");
        if (online.back().mse_test < uniform.back().mse_test) ++wins;
        if (online[9].max_var < online[0].max_var) ++variance_drops;
        mse_pairs += (mse_pairs.empty() ? "" : " ") + fmt(online.back().mse_test, 2) + "/" +
                     fmt(uniform.back().mse_test, 2);
    }
    const double took = seconds_since(t0);
    Verdict v;
    v.pass = wins >= 8 && variance_drops >= 9 && took < 300.0;
    v.detail = "online beats uniform in " + std::to_string(wins) + "/10, max variance drops in " +
               std::to_string(variance_drops) + "/10, " + fmt(took) + " s; final mse online/uniform: " + mse_pairs;
    return v;
}

struct NoSignals : SignalSource {
    std::vector<ManagerSignal> manager_poll() override { return {}; }
};

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

Verdict cancellation() {
    TempDir dir;
    Executor ex;
    ex.register_app(DYNENS_STUB_PATH, "forces");
    SubmitSpec s;
    s.app_name = "forces";
    s.app_args = "10 1 30";
    s.bypass_runner = true;
    LaunchContext ctx;
    ctx.workdir = dir.path;
    PollingOptions opts;
    opts.poll_interval = 0.1;
    opts.timeout = 2.0;
    opts.kill_grace = 2.0;
    auto& task = ex.submit(s, ctx);
    NoSignals none;
    const auto t0 = Clock::now();
    const auto outcome = polling_loop(task, none, opts);
    const double took = seconds_since(t0);
    const double bound = *opts.timeout + 2 * opts.poll_interval + opts.kill_grace;
    const bool poll_ok = outcome == PollOutcome::KILLED_ON_TIMEOUT && took <= bound;

    const json j = {
        {"schema_version", 1},
        {"nworkers", 5},
        {"seed", 11},
        {"ensemble_dir", (dir.path / "ens").string()},
        {"exit_criteria", {{"wallclock_max", 120}}},
        {"apps", {{"forces", DYNENS_STUB_PATH}}},
        {"sim_specs",
         {{"sim_f", "sim_stub_app"},
          {"user",
           {{"app_name", "forces"}, {"particles", 40}, {"steps", 3}, {"slow_above", 0.75}, {"slow_sleep", 30},
            {"timeout", 2}, {"poll_interval", 0.1}, {"kill_grace", 1}, {"bypass_runner", true}}}}},
        {"gen_specs",
         {{"gen_f", "gp_online"},
          {"persis", true},
          {"user",
           {{"lb", {0, 0}}, {"ub", {1, 1}}, {"gen_batch_size", 4}, {"points_per_dim", 20},
            {"test_objective", "norm"}, {"test_points", 50}, {"max_batches", 3}, {"metrics_path", "metrics.csv"}}}}},
    };
    const auto run = prepare_run(parse_config(j), EnvSnapshot{});
    const auto out = run_ensemble(run.runtime, run.gen, run.sim, run.alloc);
    int killed = 0, killed_flagged = 0, valid = 0;
    for (const auto& r : out.history.records()) {
        if (!r.returned) continue;
        if (r.x[0] > 0.75) {
            ++killed;
            if (r.kill_sent && std::isnan(r.f)) ++killed_flagged;
        } else if (std::isfinite(r.f)) {
            ++valid;
        }
    }
    const auto csv = read_csv(dir.path / "ens" / "metrics.csv");
    long n_train = -1;
    if (csv.size() >= 2) {
        const auto& header = csv.front();
        const auto col = std::find(header.begin(), header.end(), "n_train") - header.begin();
        if (col < static_cast<long>(csv.back().size())) n_train = std::stol(csv.back()[col]);
    }
    Verdict v;
    v.pass = poll_ok && killed > 0 && killed_flagged == killed && n_train == valid;
    v.detail = "polling loop " + std::string(to_string(outcome)) + " after " + fmt(took) + " s (bound " +
               fmt(bound) + " s); ensemble: " + std::to_string(killed) + " slow points, " +
               std::to_string(killed_flagged) + " with kill_sent and f=NaN, model size " + std::to_string(n_train) +
               " vs " + std::to_string(valid) + " valid results";
    return v;
}

RuntimeConfig random_batch_config(std::size_t sim_max, CommsMode comms) {
    RuntimeConfig c;
    c.nworkers = 4;
    c.comms = comms;
    c.dedicated_gen_worker = comms == CommsMode::local;
    c.exit.sim_max = sim_max;
    c.dim = 2;
    c.worker.base_seed = 42;
    c.worker.gen_user = {{"lb", {-3.0, -2.0}}, {"ub", {3.0, 2.0}}, {"gen_batch_size", 10}};
    return c;
}

History run_random_batch(std::size_t sim_max, CommsMode comms, std::optional<History> h0 = std::nullopt) {
    return run_ensemble(random_batch_config(sim_max, comms), generator_registry().at("gen_random_batch"),
                        simulator_registry().at("sim_norm"), persistent_alloc, h0)
        .history;
}

Verdict restart() {
    TempDir dir;
    const auto half = run_random_batch(100, CommsMode::local);
    half.dump(dir.path / "half.tsv");
    const auto resumed = run_random_batch(200, CommsMode::local, History::load(dir.path / "half.tsv"));
    const auto straight = run_random_batch(200, CommsMode::local);
    Verdict v;
    v.pass = half.returned_count() == 100 && straight.returned_count() == 200 && same_content(resumed, straight);
    v.detail = "resumed run has " + std::to_string(resumed.returned_count()) + " returned, uninterrupted " +
               std::to_string(straight.returned_count()) + ", histories " +
               (same_content(resumed, straight) ? "identical" : "differ");
    return v;
}

Verdict exit_exactness() {
    TempDir dir;
    auto config = load_config(std::filesystem::path(DYNENS_SOURCE_DIR) / "configs" / "sim_max_500.json");
    config.ensemble_dir = dir.path / "ens";
    const auto run = prepare_run(config, EnvSnapshot{});
    const auto out = run_ensemble(run.runtime, run.gen, run.sim, run.alloc);
    Verdict v;
    v.pass = out.history.returned_count() == 500 && out.flag == CompletionFlag::SIM_MAX;
    v.detail = std::to_string(out.history.returned_count()) + " returned, " + std::to_string(out.history.size()) +
               " generated, stopped on " + std::string(to_string(out.flag));
    return v;
}

Verdict overhead() {
    TempDir dir;
    const auto timing_file = dir.path / "batch_seconds.txt";
    UserFn gen = [](const Batch&, const json& user, WorkerContext& ctx) -> Batch {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::ofstream log(user.at("timing_file").get<std::string>());
        for (int b = 0; b < 20; ++b) {
            Batch pts(32);
            for (auto& p : pts) p.x = {u(ctx.rng()), u(ctx.rng())};
            const auto t0 = Clock::now();
            auto [tag, results] = ctx.send_recv(std::move(pts));
            const double took = seconds_since(t0);
            if (tag != MessageTag::RESULT || results.size() != 32) throw std::runtime_error("incomplete batch");
            log << took << "\n";
        }
        return {};
    };
    RuntimeConfig c;
    c.nworkers = 33;
    c.dedicated_gen_worker = true;
    c.dim = 2;
    c.exit.wallclock_max = 120.0;
    c.worker.base_seed = 3;
    c.worker.ensemble_dir = dir.path / "ens";
    c.worker.gen_user = {{"timing_file", timing_file.string()}};
    c.worker.sim_user = {{"sleep", 0.2}};
    const auto out = run_ensemble(c, gen, simulator_registry().at("sim_sleep"), persistent_alloc);
    std::vector<double> times;
    std::ifstream in(timing_file);
    for (double t; in >> t;) times.push_back(t);
    Verdict v;
    if (times.size() != 20) {
        v.detail = "recorded " + std::to_string(times.size()) + " of 20 batches";
        return v;
    }
    std::sort(times.begin(), times.end());
    const double median = 0.5 * (times[9] + times[10]);
    v.pass = median <= 1.25 * 0.2 && out.flag == CompletionFlag::GEN_FINISHED;
    v.detail = "32 simulation workers, median batch " + fmt(1000 * median) + " ms (limit 250 ms), min " +
               fmt(1000 * times.front()) + " ms, max " + fmt(1000 * times.back()) + " ms";
    return v;
}

Verdict mode_equivalence() {
    const auto local = run_random_batch(300, CommsMode::local);
    const auto gom = run_random_batch(300, CommsMode::gen_on_manager);
    Verdict v;
    v.pass = local.returned_count() == 300 && same_content(local, gom);
    v.detail = std::to_string(local.size()) + " vs " + std::to_string(gom.size()) + " records, histories " +
               (same_content(local, gom) ? "identical" : "differ");
    return v;
}

}  // namespace

int main() {
    const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
        {1, scheduler_oracle}, {2, golden_runlines}, {3, gp_numerics}, {4, training_policy},
        {5, online_learning},  {6, cancellation},    {7, restart},     {8, exit_exactness},
        {9, overhead},         {10, mode_equivalence},
    };
    int failures = 0;
    for (const auto& [n, check] : criteria) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v.detail = std::string("error: ") + e.what();
        }
        if (!v.pass) ++failures;
        std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << " " << v.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
