#include "dynens/runtime/worker.hpp"

#include <algorithm>

namespace dynens {

WorkerContext::WorkerContext(int worker_id, const WorkerSetup& setup, Channel& data, Channel& control)
    : worker_id_(worker_id),
      setup_(setup),
      data_(data),
      control_(control),
      executor_(std::make_unique<Executor>()),
      gen_rng_(setup.base_seed),
      sim_rng_(setup.base_seed + static_cast<std::uint64_t>(worker_id)) {
    launch_.platform = setup.platform;
    for (const auto& [name, path] : setup.apps) executor_->register_app(path, name);
}

namespace {

void assign_ids(Batch& points, SimId& next_id) {
    for (auto& p : points) {
        if (p.sim_id < 0) {
            p.sim_id = next_id;
        } else if (p.sim_id != next_id) {
            throw ProtocolError("explicit sim_id " + std::to_string(p.sim_id) + " is not the next id " +
                                std::to_string(next_id));
        }
        ++next_id;
    }
}

}  // namespace

std::vector<SimId> WorkerContext::send(Batch points) {
    if (!persistent_) throw ProtocolError("send outside a persistent generator");
    if (stopped_) throw ProtocolError("send after STOP");
    assign_ids(points, next_id_);
    std::vector<SimId> ids;
    for (const auto& p : points) ids.push_back(p.sim_id);
    Message m;
    m.tag = MessageTag::EVAL_GEN;
    m.batch = std::move(points);
    data_.send(m);
    return ids;
}

std::pair<MessageTag, Batch> WorkerContext::recv() {
    if (!persistent_) throw ProtocolError("recv outside a persistent generator");
    if (stopped_) throw ProtocolError("recv after STOP");
    auto m = data_.recv();
    if (!m) throw ProtocolError("manager closed the channel");
    if (is_stop(m->tag)) {
        stopped_ = true;
        return {m->tag, {}};
    }
    if (m->tag != MessageTag::RESULT)
        throw ProtocolError("unexpected " + std::string(to_string(m->tag)) + " while waiting for results");
    return {MessageTag::RESULT, std::move(m->batch)};
}

void WorkerContext::request_cancel(std::vector<SimId> ids) {
    if (!persistent_) throw ProtocolError("request_cancel outside a persistent generator");
    if (ids.empty()) return;
    Message m;
    m.tag = MessageTag::EVAL_GEN;
    m.ids = std::move(ids);
    data_.send(m);
}

std::vector<ManagerSignal> WorkerContext::manager_poll() {
    std::vector<ManagerSignal> out;
    while (control_.readable(0.0)) {
        auto m = control_.recv();
        if (!m) break;
        if (is_stop(m->tag)) {
            out.push_back({ManagerSignal::Kind::STOP, -1});
        } else if (m->tag == MessageTag::KILL) {
            for (SimId id : m->ids)
                if (std::find(current_ids_.begin(), current_ids_.end(), id) != current_ids_.end())
                    out.push_back({ManagerSignal::Kind::KILL, id});
        }
    }
    return out;
}

const std::filesystem::path& WorkerContext::sim_dir() {
    if (sim_dir_.empty()) {
        auto dir = setup_.ensemble_dir / ("worker" + std::to_string(worker_id_));
        dir /= current_ids_.empty() ? std::string("gen") : "sim" + std::to_string(current_ids_.front());
        std::filesystem::create_directories(dir);
        sim_dir_ = dir;
    }
    return sim_dir_;
}

LaunchContext WorkerContext::launch() {
    LaunchContext lc = launch_;
    lc.workdir = sim_dir();
    return lc;
}

void worker_loop(WorkerContext& ctx, const UserFn& gen_fn, const UserFn& sim_fn) {
    while (!ctx.stopped_) {
        auto msg = ctx.data_.recv();
        if (!msg || is_stop(msg->tag)) {
            ctx.stopped_ = true;
            return;
        }

        ctx.status_ = CalcStatus::ok;
        ctx.note_.clear();
        ctx.sim_dir_.clear();
        ctx.current_ids_.clear();
        Message out;
        out.tag = MessageTag::RESULT;

        if (msg->tag == MessageTag::EVAL_SIM) {
            for (const auto& p : msg->batch) ctx.current_ids_.push_back(p.sim_id);
            ctx.in_gen_ = false;
            ctx.launch_.assignment = msg->assignment.value_or(Assignment{});
            try {
                out.batch = sim_fn(msg->batch, ctx.setup_.sim_user, ctx);
                if (out.batch.size() != msg->batch.size())
                    throw ProtocolError("simulator returned " + std::to_string(out.batch.size()) + " records for " +
                                        std::to_string(msg->batch.size()));
                for (std::size_t i = 0; i < out.batch.size(); ++i) {
                    if (out.batch[i].sim_id < 0) out.batch[i].sim_id = msg->batch[i].sim_id;
                    if (out.batch[i].sim_id != msg->batch[i].sim_id)
                        throw ProtocolError("simulator changed sim_id " + std::to_string(msg->batch[i].sim_id));
                }
                out.status = ctx.status_;
                out.error = ctx.note_;
            } catch (const std::exception& e) {
                out.status = CalcStatus::failed;
                out.error = e.what();
                out.batch = msg->batch;
                for (auto& p : out.batch) p.f = kNaN;
            }
        } else if (msg->tag == MessageTag::EVAL_GEN) {
            ctx.in_gen_ = true;
            ctx.persistent_ = msg->persistent;
            ctx.next_id_ = msg->next_id;
            if (!msg->persistent) {
                std::seed_seq seq{static_cast<std::uint32_t>(ctx.setup_.base_seed),
                                  static_cast<std::uint32_t>(ctx.setup_.base_seed >> 32),
                                  static_cast<std::uint32_t>(msg->next_id)};
                ctx.gen_rng_.seed(seq);
            }
            try {
                out.batch = gen_fn(msg->batch, ctx.setup_.gen_user, ctx);
                if (msg->persistent) {
                    out.tag = MessageTag::FINISHED_PERSISTENT_GEN;
                    assign_ids(out.batch, ctx.next_id_);
                }
            } catch (const std::exception& e) {
                out.tag = MessageTag::RESULT;
                out.status = CalcStatus::failed;
                out.error = e.what();
                out.batch.clear();
            }
            ctx.in_gen_ = false;
            ctx.persistent_ = false;
        } else {
            out.status = CalcStatus::failed;
            out.error = "unexpected " + std::string(to_string(msg->tag)) + " on an idle worker";
        }

        try {
            ctx.data_.send(out);
        } catch (const ChannelError&) {
            return;
        }
    }
}

}  // namespace dynens
