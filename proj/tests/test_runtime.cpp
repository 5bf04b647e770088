#include <doctest.h>

#include <chrono>
#include <map>
#include <random>
#include <set>
#include <thread>

#include "dynens/app/functions.hpp"
#include "dynens/runtime.hpp"
#include "test_util.hpp"

using namespace dynens;
using nlohmann::json;

namespace {

const UserFn& gen_named(const std::string& n) { return generator_registry().at(n); }
const UserFn& sim_named(const std::string& n) { return simulator_registry().at(n); }

RuntimeConfig base_config(int nworkers, std::size_t sim_max) {
    RuntimeConfig c;
    c.nworkers = nworkers;
    c.exit.sim_max = sim_max;
    c.dim = 2;
    c.worker.base_seed = 42;
    c.worker.gen_user = {{"lb", {-3.0, -2.0}}, {"ub", {3.0, 2.0}}, {"gen_batch_size", 10}};
    c.record_trace = true;
    return c;
}

// Checks the dispatch/result trace: every sim dispatched once, results come
// from the worker it went to, forwarded ids had returned and go back once.
std::string trace_violation(const RunOutcome& out) {
    std::map<SimId, int> dispatched_to;
    std::set<SimId> returned, forwarded, generated;
    for (const auto& e : out.trace) {
        switch (e.kind) {
        case TraceEvent::Kind::GEN_POINTS:
            for (SimId id : e.ids)
                if (!generated.insert(id).second) return "sim " + std::to_string(id) + " generated twice";
            break;
        case TraceEvent::Kind::DISPATCH_SIM:
            for (SimId id : e.ids) {
                if (!dispatched_to.emplace(id, e.worker).second) return "sim " + std::to_string(id) + " dispatched twice";
            }
            break;
        case TraceEvent::Kind::RESULT_SIM:
            for (SimId id : e.ids) {
                auto it = dispatched_to.find(id);
                if (it == dispatched_to.end()) return "result for undispatched sim " + std::to_string(id);
                if (it->second != e.worker) return "result from the wrong worker for sim " + std::to_string(id);
                if (!returned.insert(id).second) return "sim " + std::to_string(id) + " returned twice";
            }
            break;
        case TraceEvent::Kind::FORWARD:
            for (SimId id : e.ids) {
                if (!returned.count(id)) return "forwarded sim " + std::to_string(id) + " before it returned";
                if (!forwarded.insert(id).second) return "sim " + std::to_string(id) + " forwarded twice";
            }
            break;
        default:
            break;
        }
    }
    for (const auto& r : out.history.records()) {
        if (r.given != (dispatched_to.count(r.sim_id) > 0)) return "given flag disagrees with the trace";
        if (r.returned != (returned.count(r.sim_id) > 0)) return "returned flag disagrees with the trace";
    }
    return {};
}

Batch norm_in_order(const Batch& in, const json&, WorkerContext&) {
    Batch out = in;
    for (auto& p : out) p.f = euclidean_norm(p.x);
    return out;
}

}  // namespace

TEST_CASE("messages survive encoding") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> U(-1e3, 1e3);
    for (int i = 0; i < 200; ++i) {
        Message m;
        m.tag = static_cast<MessageTag>(rng() % 7);
        m.status = static_cast<CalcStatus>(rng() % 3);
        m.persistent = rng() % 2;
        m.next_id = static_cast<SimId>(rng() % 1000);
        m.error = i % 3 ? "" : "boom " + std::to_string(i);
        for (std::size_t k = 0; k < rng() % 5; ++k) {
            Point p;
            p.sim_id = static_cast<SimId>(rng() % 100) - 1;
            p.x = {U(rng), U(rng), 1.0 / 3.0};
            p.f = rng() % 4 ? U(rng) : kNaN;
            p.priority = U(rng);
            p.num_procs = static_cast<int>(rng() % 4);
            p.num_gpus = static_cast<int>(rng() % 4);
            m.batch.push_back(p);
        }
        for (std::size_t k = 0; k < rng() % 3; ++k) m.ids.push_back(static_cast<SimId>(rng() % 50));
        if (rng() % 2) {
            Assignment a;
            a.nodes = {{"n0", 0, {0, 1}, {2, 3}, 4}};
            a.rset_ids = {0, 1};
            a.total_procs = 4;
            a.total_gpus = 2;
            m.assignment = a;
        }
        const Message back = decode(encode(m));
        CHECK(back.tag == m.tag);
        CHECK(back.status == m.status);
        CHECK(back.persistent == m.persistent);
        CHECK(back.next_id == m.next_id);
        CHECK(back.error == m.error);
        CHECK(back.batch == m.batch);
        CHECK(back.ids == m.ids);
        CHECK(back.assignment == m.assignment);
    }
    CHECK_THROWS(decode({0x01, 0x02}));
}

TEST_CASE("channels deliver in order and report end of stream") {
    auto [a, b] = make_channel_pair();
    CHECK_FALSE(b.readable(0.0));
    CHECK_FALSE(b.recv_for(0.05).has_value());
    Message big;
    big.tag = MessageTag::EVAL_SIM;
    for (int i = 0; i < 5000; ++i) big.batch.push_back(Point{i, {1.0, 2.0, 3.0}});
    std::thread t([&] {
        for (int i = 0; i < 3; ++i) {
            Message m;
            m.next_id = i;
            a.send(m);
        }
        a.send(big);
        a.close();
    });
    for (int i = 0; i < 3; ++i) {
        auto m = b.recv();
        REQUIRE(m);
        CHECK(m->next_id == i);
    }
    auto m = b.recv();
    REQUIRE(m);
    CHECK(m->batch.size() == 5000);
    t.join();
    CHECK_FALSE(b.recv().has_value());
}

TEST_CASE("exit criteria") {
    History h(1);
    std::vector<PointRequest> pts(500, PointRequest{{0.0}});
    h.submit_points(pts, 0);
    std::vector<SimId> ids(500);
    for (SimId i = 0; i < 500; ++i) ids[i] = i;
    h.mark_given(ids, 1, 0.0);
    std::vector<SimResult> res;
    for (SimId i = 0; i < 499; ++i) res.push_back({i, 1.0, 1, 1.0});
    h.update_with_results(res);

    ExitCriteria c;
    c.sim_max = 500;
    CHECK_FALSE(check_exit(h, 0.0, c));
    SimResult last{499, 0.005, 1, 1.0};
    h.update_with_results(std::span(&last, 1));
    CHECK(check_exit(h, 0.0, c) == CompletionFlag::SIM_MAX);

    ExitCriteria s;
    s.stop_val = StopValue{"f", 0.01};
    CHECK(check_exit(h, 0.0, s) == CompletionFlag::STOP_VAL);
    s.stop_val->threshold = 0.001;
    CHECK_FALSE(check_exit(h, 0.0, s));

    ExitCriteria g;
    g.gen_max = 500;
    CHECK(check_exit(h, 0.0, g) == CompletionFlag::GEN_MAX);
    g.gen_max = 501;
    CHECK_FALSE(check_exit(h, 0.0, g));

    ExitCriteria w;
    w.wallclock_max = 2.0;
    CHECK_FALSE(check_exit(h, 1.9, w));
    CHECK(check_exit(h, 2.0, w) == CompletionFlag::WALLCLOCK);
}

TEST_CASE("default allocator") {
    History h(1);
    std::vector<WorkerState> ws = {{1}, {2}};
    GenTracking gen;

    SUBCASE("all idle and nothing pending: one generator call") {
        AllocInput in{h, ws, nullptr, gen};
        auto w = default_alloc(in);
        REQUIRE(w.size() == 1);
        CHECK(w[0].tag == MessageTag::EVAL_GEN);
        CHECK(w[0].target_worker == 1);
        CHECK_FALSE(w[0].persistent);
    }
    SUBCASE("three pending, two idle: the top two by priority") {
        std::vector<PointRequest> p = {{{0.0}, 0.1}, {{1.0}, 0.9}, {{2.0}, 0.5}};
        h.submit_points(p, 0);
        AllocInput in{h, ws, nullptr, gen};
        auto w = default_alloc(in);
        const auto order = h.pending_sims();
        REQUIRE(w.size() == 2);
        CHECK(w[0].target_worker == 1);
        CHECK(w[0].record_ids == std::vector<SimId>{order[0]});
        CHECK(w[1].target_worker == 2);
        CHECK(w[1].record_ids == std::vector<SimId>{order[1]});
        CHECK(order[0] == 1);
        CHECK(order[1] == 2);
    }
    SUBCASE("busy workers get nothing; a generation budget of zero stops generation") {
        ws[0].status = WorkerStatus::BUSY_SIM;
        ws[1].status = WorkerStatus::BUSY_GEN;
        AllocInput in{h, ws, nullptr, gen};
        CHECK(default_alloc(in).empty());
        ws[1].status = WorkerStatus::IDLE;
        AllocInput none{h, ws, nullptr, gen, std::size_t{0}};
        CHECK(default_alloc(none).empty());
    }
    SUBCASE("oversized request is deferred with one warning") {
        NodeInventory inv{{{"n0", 4, 0}}};
        PlatformSpec plat;
        plat.cores_per_node = plat.logical_cores_per_node = 4;
        ResourcePool pool(build_resource_sets(inv, plat, 2, false), plat, {});
        std::vector<PointRequest> p = {{{0.0}, 0.0, 8}, {{1.0}, 0.0, 1}};
        h.submit_points(p, 0);
        std::vector<std::string> warnings;
        AllocInput in{h, ws, &pool, gen};
        in.warnings = &warnings;
        auto w = default_alloc(in);
        REQUIRE(w.size() == 1);
        CHECK(w[0].record_ids == std::vector<SimId>{1});
        REQUIRE(w[0].assignment);
        CHECK(w[0].assignment->total_procs == 1);
        default_alloc(in);
        CHECK(warnings.size() == 1);
        CHECK(warnings[0].find("sim_id 0") != std::string::npos);
    }
}

TEST_CASE("persistent allocator") {
    History h(1);
    std::vector<WorkerState> ws = {{1}, {2}, {3}};
    GenTracking gen;
    AllocInput in{h, ws, nullptr, gen};
    auto w = persistent_alloc(in);
    REQUIRE(w.size() == 1);
    CHECK(w[0].tag == MessageTag::EVAL_GEN);
    CHECK(w[0].persistent);
    CHECK(w[0].target_worker == 1);

    ws[0].status = WorkerStatus::PERSISTENT_GEN;
    gen.started = true;
    gen.worker = 1;
    std::vector<PointRequest> p(3, PointRequest{{0.0}});
    auto ids = h.submit_points(p, 1);
    gen.outstanding = {ids.begin(), ids.end()};
    auto sims = persistent_alloc(in);
    REQUIRE(sims.size() == 2);
    CHECK(sims[0].target_worker == 2);
    CHECK(sims[1].target_worker == 3);

    h.mark_given(ids, 2, 0.0);
    std::vector<SimResult> two = {{0, 1.0, 2, 1.0}, {1, 1.0, 3, 1.0}};
    h.update_with_results(two);
    gen.unforwarded = {0, 1};
    ws[1].status = ws[2].status = WorkerStatus::BUSY_SIM;
    CHECK(persistent_alloc(in).empty());
    in.async_return = true;
    auto early = persistent_alloc(in);
    REQUIRE(early.size() == 1);
    CHECK(early[0].record_ids == std::vector<SimId>{0, 1});
    in.async_return = false;
    SimResult third{2, 1.0, 2, 2.0};
    h.update_with_results(std::span(&third, 1));
    gen.unforwarded.push_back(2);
    auto all = persistent_alloc(in);
    REQUIRE(all.size() == 1);
    CHECK(all[0].target_worker == 1);
    CHECK(all[0].record_ids.size() == 3);
}

TEST_CASE("ensembles with a one-shot generator") {
    auto c = base_config(3, 500);
    auto out = run_ensemble(c, gen_named("gen_random_batch"), sim_named("sim_norm"), default_alloc);
    CHECK(out.flag == CompletionFlag::SIM_MAX);
    CHECK(out.history.returned_count() == 500);
    CHECK(trace_violation(out) == "");
    for (const auto& r : out.history.records()) {
        if (!r.returned) continue;
        CHECK(r.f == doctest::Approx(std::hypot(r.x[0], r.x[1])).epsilon(1e-12));
        CHECK(r.x[0] >= -3.0);
        CHECK(r.x[0] <= 3.0);
    }
    std::set<std::vector<double>> distinct;
    for (const auto& r : out.history.records()) distinct.insert(r.x);
    CHECK(distinct.size() == out.history.size());
}

TEST_CASE("sim_max of zero shuts down at once") {
    auto c = base_config(2, 0);
    auto out = run_ensemble(c, gen_named("gen_random_batch"), sim_named("sim_norm"), default_alloc);
    CHECK(out.flag == CompletionFlag::SIM_MAX);
    CHECK(out.history.size() == 0);
}

TEST_CASE("norm simulator on a hand-computed point") {
    auto c = base_config(1, 1);
    History h0(2);
    std::vector<PointRequest> p = {{{3.0, 4.0}}};
    h0.submit_points(p, 0);
    auto out = run_ensemble(c, gen_named("gen_random_batch"), sim_named("sim_norm"), default_alloc, h0);
    REQUIRE(out.history.returned_count() == 1);
    CHECK(out.history.at(0).f == 5.0);
    CHECK(out.history.at(0).sim_worker == 1);
}

TEST_CASE("persistent generator in batch and async modes") {
    for (bool async : {false, true}) {
        for (auto comms : {CommsMode::local, CommsMode::gen_on_manager}) {
            CAPTURE(async);
            CAPTURE(to_string(comms));
            auto c = base_config(4, 100);
            c.comms = comms;
            c.async_return = async;
            c.dedicated_gen_worker = comms == CommsMode::local;
            auto out = run_ensemble(c, gen_named("gen_random_batch"), sim_named("sim_norm"), persistent_alloc);
            CHECK(out.flag == CompletionFlag::SIM_MAX);
            CHECK(out.history.returned_count() >= 100);
            CHECK(trace_violation(out) == "");
            const int gen_worker = comms == CommsMode::local ? 1 : 0;
            std::size_t forwards = 0, largest = 0;
            for (const auto& e : out.trace) {
                if (e.kind == TraceEvent::Kind::DISPATCH_SIM) CHECK(e.worker != gen_worker);
                if (e.kind == TraceEvent::Kind::DISPATCH_GEN) CHECK(e.worker == gen_worker);
                if (e.kind != TraceEvent::Kind::FORWARD) continue;
                ++forwards;
                largest = std::max(largest, e.ids.size());
                if (!async) CHECK(e.ids.size() == 10);
            }
            CHECK(forwards >= 9);
            for (const auto& r : out.history.records()) CHECK(r.gen_worker == gen_worker);
        }
    }
}

TEST_CASE("seeded batch runs are reproducible, across comms modes and restarts") {
    auto run = [](CommsMode m, std::size_t sim_max, std::optional<History> h0 = std::nullopt) {
        auto c = base_config(4, sim_max);
        c.comms = m;
        c.dedicated_gen_worker = m == CommsMode::local;
        return run_ensemble(c, gen_named("gen_random_batch"), sim_named("sim_norm"), persistent_alloc, h0).history;
    };
    const auto a = run(CommsMode::local, 200);
    const auto b = run(CommsMode::local, 200);
    const auto g = run(CommsMode::gen_on_manager, 200);
    CHECK(a.size() == 200);
    CHECK(same_content(a, b));
    CHECK(same_content(a, g));

    const auto half = run(CommsMode::local, 100);
    REQUIRE(half.returned_count() == 100);
    TempDir dir;
    half.dump(dir.path / "half.tsv");
    const auto resumed = run(CommsMode::local, 200, History::load(dir.path / "half.tsv"));
    CHECK(same_content(resumed, a));

    auto other = base_config(4, 200);
    other.worker.base_seed = 43;
    other.dedicated_gen_worker = true;
    auto diff = run_ensemble(other, gen_named("gen_random_batch"), sim_named("sim_norm"), persistent_alloc).history;
    CHECK_FALSE(same_content(diff, a));
}

TEST_CASE("failing simulations") {
    UserFn boom = [](const Batch& in, const json&, WorkerContext& ctx) -> Batch {
        if (in[0].sim_id == 3) throw std::runtime_error("injected fault");
        return norm_in_order(in, {}, ctx);
    };
    TempDir dir;
    SUBCASE("abort dumps the history and names the worker") {
        auto c = base_config(2, 20);
        c.dump_path = dir.path / "h.tsv";
        try {
            run_ensemble(c, gen_named("gen_random_batch"), boom, default_alloc);
            FAIL("expected an abort");
        } catch (const EnsembleError& e) {
            CHECK(e.worker() >= 1);
            CHECK(std::string(e.what()).find("injected fault") != std::string::npos);
        }
        CHECK(std::filesystem::exists(dir.path / "h.tsv"));
    }
    SUBCASE("without abort the record gets NaN and the run continues") {
        auto c = base_config(2, 20);
        c.abort_on_exception = false;
        auto out = run_ensemble(c, gen_named("gen_random_batch"), boom, default_alloc);
        CHECK(out.history.returned_count() == 20);
        CHECK(std::isnan(out.history.at(3).f));
        CHECK(out.warnings.size() == 1);
    }
}

TEST_CASE("generator cancellation kills a running simulation") {
    UserFn gen = [](const Batch&, const json&, WorkerContext& ctx) -> Batch {
        Batch pts(3);
        pts[0].x = {3.0, 4.0};
        pts[1].x = {6.0, 8.0};
        pts[2].x = {0.0, 1.0};
        auto ids = ctx.send(pts);
        std::this_thread::sleep_for(std::chrono::milliseconds(300));
        ctx.request_cancel({ids[0]});
        auto [tag, results] = ctx.recv();
        if (tag != MessageTag::RESULT || results.size() != 3) throw std::runtime_error("unexpected reply");
        return {};
    };
    UserFn sim = [](const Batch& in, const json&, WorkerContext& ctx) -> Batch {
        Batch out = in;
        out[0].f = euclidean_norm(in[0].x);
        if (in[0].sim_id != 0) return out;
        for (int i = 0; i < 500; ++i) {
            for (const auto& s : ctx.manager_poll()) {
                if (s.kind != ManagerSignal::Kind::KILL || s.sim_id != 0) throw std::runtime_error("wrong signal");
                out[0].f = kNaN;
                ctx.set_calc_status(CalcStatus::killed);
                return out;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        return out;
    };
    auto c = base_config(4, 100);
    c.dedicated_gen_worker = true;
    const auto t0 = std::chrono::steady_clock::now();
    auto out = run_ensemble(c, gen, sim, persistent_alloc);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(out.flag == CompletionFlag::GEN_FINISHED);
    CHECK(took < 4.0);
    const auto& r0 = out.history.at(0);
    CHECK(r0.cancel_requested);
    CHECK(r0.kill_sent);
    CHECK(r0.returned);
    CHECK(std::isnan(r0.f));
    CHECK(out.history.at(1).f == 10.0);
    CHECK(out.history.at(2).f == 1.0);
    CHECK(trace_violation(out) == "");
    bool killed = false;
    for (const auto& e : out.trace) killed = killed || (e.kind == TraceEvent::Kind::KILL && e.ids == std::vector<SimId>{0});
    CHECK(killed);
}

TEST_CASE("wallclock stop reaches simulations that poll the manager") {
    auto c = base_config(3, 1000);
    c.exit.sim_max.reset();
    c.exit.wallclock_max = 0.5;
    c.shutdown_timeout = 10.0;
    c.worker.sim_user = {{"sleep", 30.0}};
    const auto t0 = std::chrono::steady_clock::now();
    auto out = run_ensemble(c, gen_named("gen_random_batch"), sim_named("sim_sleep"), default_alloc);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(out.flag == CompletionFlag::WALLCLOCK);
    CHECK(took < 3.0);
    CHECK(out.history.given_count() >= 1);
    CHECK(out.history.returned_count() == 0);
}

TEST_CASE("a generator that finishes ends the run") {
    UserFn gen = [](const Batch&, const json&, WorkerContext& ctx) -> Batch {
        Batch pts(4);
        for (int i = 0; i < 4; ++i) pts[i].x = {static_cast<double>(i), 0.0};
        auto [tag, res] = ctx.send_recv(pts);
        if (res.size() != 4) throw std::runtime_error("expected 4 results");
        Batch last(1);
        last[0].x = {9.0, 0.0};
        return last;
    };
    for (auto comms : {CommsMode::local, CommsMode::gen_on_manager}) {
        auto c = base_config(2, 100);
        c.comms = comms;
        c.dedicated_gen_worker = comms == CommsMode::local;
        auto out = run_ensemble(c, gen, sim_named("sim_norm"), persistent_alloc);
        CHECK(out.flag == CompletionFlag::GEN_FINISHED);
        CHECK(out.history.size() == 5);
        CHECK(out.history.returned_count() == 5);
        CHECK(out.history.at(4).f == 9.0);
    }
}

TEST_CASE("resource-aware dispatch releases every assignment") {
    auto c = base_config(4, 60);
    c.inventory = NodeInventory{{{"n0", 8, 4}, {"n1", 8, 4}}};
    c.worker.platform.cores_per_node = c.worker.platform.logical_cores_per_node = 8;
    c.worker.platform.gpus_per_node = 4;
    c.worker.gen_user["max_gpus"] = 4;
    c.worker.gen_user["lb"] = {0.0, 0.0};
    c.worker.gen_user["ub"] = {4.0, 1.0};
    c.dedicated_gen_worker = true;
    c.nworkers = 5;
    UserFn check_gpus = [](const Batch& in, const json&, WorkerContext& ctx) -> Batch {
        Batch out = in;
        const auto& a = ctx.assignment();
        out[0].f = a.total_gpus >= in[0].num_gpus ? static_cast<double>(a.total_gpus) : -1.0;
        return out;
    };
    auto out = run_ensemble(c, gen_named("gen_with_gpu_counts"), check_gpus, persistent_alloc);
    CHECK(out.flag == CompletionFlag::SIM_MAX);
    CHECK(trace_violation(out) == "");
    std::set<int> seen;
    for (const auto& r : out.history.records()) {
        if (!r.returned) continue;
        CHECK(r.f >= r.num_gpus);
        seen.insert(r.num_gpus);
    }
    CHECK(seen.size() >= 3);
}
