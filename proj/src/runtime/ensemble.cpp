#include "dynens/runtime/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <thread>

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

namespace dynens {

std::string_view to_string(CompletionFlag f) {
    switch (f) {
        case CompletionFlag::SIM_MAX: return "SIM_MAX";
        case CompletionFlag::GEN_MAX: return "GEN_MAX";
        case CompletionFlag::WALLCLOCK: return "WALLCLOCK";
        case CompletionFlag::STOP_VAL: return "STOP_VAL";
        case CompletionFlag::GEN_FINISHED: return "GEN_FINISHED";
        case CompletionFlag::STALLED: return "STALLED";
    }
    return "?";
}

std::string_view to_string(CommsMode m) { return m == CommsMode::local ? "local" : "gen_on_manager"; }

CommsMode parse_comms_mode(std::string_view s) {
    if (s == "local") return CommsMode::local;
    if (s == "gen_on_manager") return CommsMode::gen_on_manager;
    throw std::invalid_argument("unknown comms mode '" + std::string(s) + "' (local, gen_on_manager)");
}

std::optional<CompletionFlag> check_exit(const History& h, double elapsed, const ExitCriteria& c) {
    if (c.sim_max && h.returned_count() >= *c.sim_max) return CompletionFlag::SIM_MAX;
    if (c.gen_max && h.size() >= *c.gen_max) return CompletionFlag::GEN_MAX;
    if (c.wallclock_max && elapsed >= *c.wallclock_max) return CompletionFlag::WALLCLOCK;
    if (c.stop_val) {
        for (const auto& r : h.records())
            if (r.returned && !std::isnan(r.f) && r.f <= c.stop_val->threshold) return CompletionFlag::STOP_VAL;
    }
    return std::nullopt;
}

namespace {

struct Peer {
    int id = 0;
    Channel data;
    Channel control;
    pid_t pid = -1;
    std::thread thread;
    bool open = true;
};

class Manager {
public:
    Manager(const RuntimeConfig& cfg, const UserFn& gen_fn, const UserFn& sim_fn, const AllocFn& alloc,
            History h)
        : cfg_(cfg), gen_fn_(gen_fn), sim_fn_(sim_fn), alloc_(alloc) {
        out_.history = std::move(h);
    }

    ~Manager() { hard_stop(); }

    RunOutcome run();

private:
    History& H() { return out_.history; }
    double now() const { return wall_seconds() - out_.history.start_time(); }
    double elapsed() const { return wall_seconds() - run_start_; }

    void trace(TraceEvent::Kind k, int worker, std::vector<SimId> ids) {
        if (cfg_.record_trace) out_.trace.push_back({k, worker, std::move(ids)});
    }

    void setup_resources();
    void spawn();
    void dispatch(const Work& w);
    void handle(std::size_t idx, Message m);
    void fail(int worker, const std::string& what);
    void maybe_dump(bool force);
    void shutdown();
    void hard_stop();
    std::size_t index_of(int worker_id) const;
    bool any_busy() const;

    const RuntimeConfig& cfg_;
    const UserFn& gen_fn_;
    const UserFn& sim_fn_;
    const AllocFn& alloc_;
    RunOutcome out_;
    std::vector<Peer> peers_;
    std::vector<WorkerState> workers_;
    std::optional<ResourcePool> pool_;
    GenTracking gen_;
    double run_start_ = 0.0;
    std::size_t last_dump_returned_ = 0;
};

std::size_t Manager::index_of(int worker_id) const {
    for (std::size_t i = 0; i < workers_.size(); ++i)
        if (workers_[i].worker_id == worker_id) return i;
    throw std::logic_error("no worker " + std::to_string(worker_id));
}

bool Manager::any_busy() const {
    return std::any_of(workers_.begin(), workers_.end(),
                       [](const WorkerState& w) { return w.status != WorkerStatus::IDLE; });
}

void Manager::setup_resources() {
    if (!cfg_.inventory) return;
    bool dedicated = cfg_.comms == CommsMode::local && cfg_.dedicated_gen_worker;
    auto rsets = build_resource_sets(*cfg_.inventory, cfg_.worker.platform, cfg_.nworkers, dedicated,
                                     cfg_.rset_options);
    pool_.emplace(std::move(rsets), cfg_.worker.platform, cfg_.schedule);
}

void Manager::spawn() {
    const bool gom = cfg_.comms == CommsMode::gen_on_manager;
    std::fflush(nullptr);
    for (int id = 1; id <= cfg_.nworkers; ++id) {
        auto [data_m, data_w] = make_channel_pair();
        auto [ctl_m, ctl_w] = make_channel_pair();
        pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("fork failed for worker " + std::to_string(id));
        if (pid == 0) {
            for (auto& p : peers_) {
                p.data.close();
                p.control.close();
            }
            data_m.close();
            ctl_m.close();
            int code = 0;
            try {
                WorkerContext ctx(id, cfg_.worker, data_w, ctl_w);
                worker_loop(ctx, gen_fn_, sim_fn_);
            } catch (...) {
                code = 1;
            }
            std::fflush(nullptr);
            ::_exit(code);
        }
        Peer p;
        p.id = id;
        p.data = std::move(data_m);
        p.control = std::move(ctl_m);
        p.pid = pid;
        peers_.push_back(std::move(p));
        workers_.push_back(WorkerState{id, WorkerStatus::IDLE, true, !gom, {}, std::nullopt});
    }
    if (gom) {
        auto [data_m, data_w] = make_channel_pair();
        auto [ctl_m, ctl_w] = make_channel_pair();
        Peer p;
        p.id = 0;
        p.data = std::move(data_m);
        p.control = std::move(ctl_m);
        const WorkerSetup& setup = cfg_.worker;
        const UserFn& gen = gen_fn_;
        const UserFn& sim = sim_fn_;
        p.thread = std::thread([&setup, &gen, &sim, dw = std::move(data_w), cw = std::move(ctl_w)]() mutable {
            try {
                WorkerContext ctx(0, setup, dw, cw);
                worker_loop(ctx, gen, sim);
            } catch (...) {
            }
            dw.close();
            cw.close();
        });
        peers_.insert(peers_.begin(), std::move(p));
        workers_.insert(workers_.begin(), WorkerState{0, WorkerStatus::IDLE, false, true, {}, std::nullopt});
    }
}

void Manager::dispatch(const Work& w) {
    auto idx = index_of(w.target_worker);
    auto& ws = workers_[idx];
    auto& peer = peers_[idx];
    Message m;
    if (w.tag == MessageTag::EVAL_SIM) {
        if (ws.status != WorkerStatus::IDLE) throw std::logic_error("sim work for a busy worker");
        H().mark_given(w.record_ids, w.target_worker, now());
        m.tag = MessageTag::EVAL_SIM;
        for (SimId id : w.record_ids) m.batch.push_back(to_point(H().at(id)));
        m.assignment = w.assignment;
        ws.status = WorkerStatus::BUSY_SIM;
        ws.active_ids = w.record_ids;
        ws.assignment = w.assignment;
        trace(TraceEvent::Kind::DISPATCH_SIM, w.target_worker, w.record_ids);
    } else if (w.tag == MessageTag::EVAL_GEN && w.persistent && ws.status == WorkerStatus::PERSISTENT_GEN) {
        std::vector<SimId> ids = w.record_ids;
        if (!cfg_.async_return) std::sort(ids.begin(), ids.end());
        m.tag = MessageTag::RESULT;
        for (SimId id : ids) m.batch.push_back(to_point(H().at(id)));
        std::erase_if(gen_.unforwarded, [&](SimId id) { return std::find(ids.begin(), ids.end(), id) != ids.end(); });
        std::erase_if(gen_.outstanding, [&](SimId id) {
            const auto& r = H().at(id);
            return r.returned || (r.cancel_requested && !r.given);
        });
        trace(TraceEvent::Kind::FORWARD, w.target_worker, ids);
    } else if (w.tag == MessageTag::EVAL_GEN) {
        if (ws.status != WorkerStatus::IDLE) throw std::logic_error("gen work for a busy worker");
        m.tag = MessageTag::EVAL_GEN;
        m.persistent = w.persistent;
        m.next_id = H().next_id();
        for (SimId id : w.record_ids) m.batch.push_back(to_point(H().at(id)));
        if (w.persistent) {
            ws.status = WorkerStatus::PERSISTENT_GEN;
            gen_.started = true;
            gen_.worker = w.target_worker;
        } else {
            ws.status = WorkerStatus::BUSY_GEN;
        }
        trace(TraceEvent::Kind::DISPATCH_GEN, w.target_worker, w.record_ids);
    } else {
        throw std::logic_error("allocator produced unsupported work");
    }
    peer.data.send(m);
}

void Manager::fail(int worker, const std::string& what) {
    maybe_dump(true);
    throw EnsembleError(worker, what);
}

void Manager::handle(std::size_t idx, Message m) {
    auto& ws = workers_[idx];
    const int wid = ws.worker_id;

    if (ws.status == WorkerStatus::BUSY_SIM && m.tag == MessageTag::RESULT) {
        if (m.status == CalcStatus::failed) {
            if (cfg_.abort_on_exception) fail(wid, "simulation failed: " + m.error);
            out_.warnings.push_back("worker " + std::to_string(wid) + ": simulation failed: " + m.error);
        } else if (!m.error.empty()) {
            out_.warnings.push_back("worker " + std::to_string(wid) + ": " + m.error);
        }
        std::vector<SimResult> results;
        std::vector<SimId> ids;
        for (const auto& p : m.batch) {
            if (std::find(ws.active_ids.begin(), ws.active_ids.end(), p.sim_id) == ws.active_ids.end())
                fail(wid, "result for sim_id " + std::to_string(p.sim_id) + " that was not dispatched to it");
            double f = m.status == CalcStatus::ok ? p.f : kNaN;
            if (m.status == CalcStatus::killed) {
                SimId one[] = {p.sim_id};
                H().mark_cancel(one);
                if (!H().at(p.sim_id).kill_sent) H().mark_kill_sent(p.sim_id);
            }
            results.push_back(SimResult{p.sim_id, f, wid, now()});
            ids.push_back(p.sim_id);
        }
        if (ids.size() != ws.active_ids.size()) fail(wid, "incomplete simulation result");
        H().update_with_results(results);
        trace(TraceEvent::Kind::RESULT_SIM, wid, ids);
        if (ws.assignment && pool_) pool_->release(*ws.assignment);
        ws.assignment.reset();
        ws.active_ids.clear();
        ws.status = WorkerStatus::IDLE;
        if (gen_.started && !gen_.finished) gen_.unforwarded.insert(gen_.unforwarded.end(), ids.begin(), ids.end());
        maybe_dump(false);
        return;
    }

    if (ws.status == WorkerStatus::BUSY_GEN && m.tag == MessageTag::RESULT) {
        if (m.status != CalcStatus::ok) fail(wid, "generator failed: " + m.error);
        std::vector<PointRequest> req;
        for (const auto& p : m.batch) req.push_back(PointRequest{p.x, p.priority, p.num_procs, p.num_gpus, {}});
        auto ids = H().submit_points(req, wid);
        trace(TraceEvent::Kind::GEN_POINTS, wid, ids);
        ws.status = WorkerStatus::IDLE;
        return;
    }

    if (ws.status == WorkerStatus::PERSISTENT_GEN) {
        if (m.tag == MessageTag::RESULT && m.status == CalcStatus::failed) fail(wid, "generator failed: " + m.error);
        if (m.tag != MessageTag::EVAL_GEN && m.tag != MessageTag::FINISHED_PERSISTENT_GEN)
            fail(wid, "unexpected " + std::string(to_string(m.tag)) + " from the persistent generator");
        if (!m.batch.empty()) {
            std::vector<PointRequest> req;
            for (const auto& p : m.batch)
                req.push_back(PointRequest{p.x, p.priority, p.num_procs, p.num_gpus, p.sim_id});
            std::vector<SimId> ids;
            try {
                ids = H().submit_points(req, wid);
            } catch (const HistoryError& e) {
                fail(wid, e.what());
            }
            gen_.outstanding.insert(ids.begin(), ids.end());
            trace(TraceEvent::Kind::GEN_POINTS, wid, ids);
        }
        if (!m.ids.empty()) {
            std::vector<SimId> running;
            try {
                running = H().mark_cancel(m.ids);
            } catch (const HistoryError& e) {
                fail(wid, e.what());
            }
            if (cfg_.kill_canceled_sims) {
                for (SimId id : running) {
                    for (std::size_t j = 0; j < workers_.size(); ++j) {
                        const auto& a = workers_[j].active_ids;
                        if (std::find(a.begin(), a.end(), id) == a.end()) continue;
                        Message k;
                        k.tag = MessageTag::KILL;
                        k.ids = {id};
                        peers_[j].control.send(k);
                        H().mark_kill_sent(id);
                        trace(TraceEvent::Kind::KILL, workers_[j].worker_id, {id});
                    }
                }
            }
        }
        if (m.tag == MessageTag::FINISHED_PERSISTENT_GEN) {
            gen_.finished = true;
            gen_.unforwarded.clear();
            ws.status = WorkerStatus::IDLE;
        }
        return;
    }

    fail(wid, "unexpected " + std::string(to_string(m.tag)) + " from a worker in state " +
                  std::to_string(static_cast<int>(ws.status)));
}

void Manager::maybe_dump(bool force) {
    if (!cfg_.dump_path) return;
    std::size_t returned = H().returned_count();
    if (force || (cfg_.dump_every > 0 && returned >= last_dump_returned_ + cfg_.dump_every)) {
        H().dump(*cfg_.dump_path);
        last_dump_returned_ = returned;
    }
}

void Manager::shutdown() {
    for (std::size_t i = 0; i < peers_.size(); ++i) {
        auto& p = peers_[i];
        if (!p.open) continue;
        Message stop;
        stop.tag = workers_[i].status == WorkerStatus::PERSISTENT_GEN ? MessageTag::PERSIS_STOP : MessageTag::STOP;
        try {
            if (workers_[i].status == WorkerStatus::BUSY_SIM) p.control.send(stop);
            p.data.send(stop);
        } catch (const ChannelError&) {
        }
        trace(TraceEvent::Kind::STOP, p.id, {});
    }

    // Drain until every worker closes its end; late results are discarded.
    const double deadline = wall_seconds() + cfg_.shutdown_timeout;
    while (true) {
        std::vector<pollfd> fds;
        std::vector<std::size_t> who;
        for (std::size_t i = 0; i < peers_.size(); ++i) {
            if (!peers_[i].open) continue;
            fds.push_back({peers_[i].data.fd(), POLLIN, 0});
            who.push_back(i);
        }
        if (fds.empty()) break;
        double left = deadline - wall_seconds();
        if (left <= 0) break;
        int r = ::poll(fds.data(), fds.size(), static_cast<int>(std::min(left, 1.0) * 1000) + 1);
        if (r <= 0) continue;
        for (std::size_t k = 0; k < fds.size(); ++k) {
            if (!fds[k].revents) continue;
            auto& p = peers_[who[k]];
            try {
                if (!p.data.recv()) p.open = false;
            } catch (const std::exception&) {
                p.open = false;
            }
        }
    }
    hard_stop();
}

void Manager::hard_stop() {
    for (auto& p : peers_) {
        if (p.pid > 0) {
            int status = 0;
            pid_t r = ::waitpid(p.pid, &status, WNOHANG);
            if (r == 0) {
                ::kill(p.pid, SIGKILL);
                ::waitpid(p.pid, &status, 0);
            }
            p.pid = -1;
        }
        p.data.close();
        p.control.close();
        p.open = false;
        if (p.thread.joinable()) p.thread.join();
    }
}

RunOutcome Manager::run() {
    run_start_ = wall_seconds();
    last_dump_returned_ = H().returned_count();

    if (auto f = check_exit(H(), 0.0, cfg_.exit)) {
        out_.flag = *f;
        maybe_dump(true);
        return std::move(out_);
    }

    setup_resources();
    spawn();

    try {
        while (true) {
            if (auto f = check_exit(H(), elapsed(), cfg_.exit)) {
                out_.flag = *f;
                break;
            }
            if (gen_.finished && !any_busy() && H().pending_sims().empty()) {
                out_.flag = CompletionFlag::GEN_FINISHED;
                break;
            }

            std::optional<std::size_t> budget;
            if (cfg_.exit.sim_max)
                budget = *cfg_.exit.sim_max > H().given_count() ? *cfg_.exit.sim_max - H().given_count() : 0;
            AllocInput in{H(),
                          workers_,
                          pool_ ? &*pool_ : nullptr,
                          gen_,
                          budget,
                          cfg_.exit.gen_max && H().size() >= *cfg_.exit.gen_max,
                          cfg_.async_return,
                          &out_.warnings};
            auto works = alloc_(in);
            for (const auto& w : works) dispatch(w);
            if (works.empty() && !any_busy()) {
                out_.flag = gen_.finished ? CompletionFlag::GEN_FINISHED : CompletionFlag::STALLED;
                break;
            }

            double wait = 1.0;
            if (cfg_.exit.wallclock_max) wait = std::clamp(*cfg_.exit.wallclock_max - elapsed(), 0.0, wait);
            std::vector<pollfd> fds;
            for (auto& p : peers_) fds.push_back({p.data.fd(), POLLIN, 0});
            int r = ::poll(fds.data(), fds.size(), static_cast<int>(wait * 1000) + 1);
            if (r < 0 && errno != EINTR) throw std::runtime_error("poll failed");
            for (std::size_t i = 0; i < fds.size() && r > 0; ++i) {
                if (!fds[i].revents) continue;
                std::optional<Message> m;
                try {
                    m = peers_[i].data.recv();
                } catch (const std::exception& e) {
                    fail(peers_[i].id, e.what());
                }
                if (!m) {
                    peers_[i].open = false;
                    fail(peers_[i].id, "worker exited unexpectedly");
                }
                handle(i, std::move(*m));
            }
        }
    } catch (...) {
        try {
            maybe_dump(true);
        } catch (...) {
        }
        hard_stop();
        throw;
    }

    shutdown();
    maybe_dump(true);
    out_.elapsed = elapsed();
    return std::move(out_);
}

}  // namespace

RunOutcome run_ensemble(const RuntimeConfig& config, const UserFn& gen_fn, const UserFn& sim_fn,
                        const AllocFn& alloc_fn, std::optional<History> H0) {
    if (config.nworkers < 1) throw std::invalid_argument("nworkers must be at least 1");
    if (!config.exit.any()) throw std::invalid_argument("at least one exit criterion is required");
    History h;
    if (H0) {
        if (config.dim && H0->dim() != config.dim)
            throw std::invalid_argument("H0 has dimension " + std::to_string(H0->dim()) + ", expected " +
                                        std::to_string(config.dim));
        h = std::move(*H0);
    } else {
        if (config.dim == 0) throw std::invalid_argument("dim must be positive");
        h = History(config.dim, wall_seconds());
    }
    Manager m(config, gen_fn, sim_fn, alloc_fn, std::move(h));
    return m.run();
}

}  // namespace dynens
