#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynens {

using SimId = std::int64_t;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// One generated point and everything that happened to it.
struct EnsembleRecord {
    SimId sim_id = 0;
    std::vector<double> x;
    double f = kNaN;
    double priority = 0.0;
    int num_procs = 0;
    int num_gpus = 0;
    int gen_worker = 0;
    std::optional<int> sim_worker;
    bool given = false;
    bool returned = false;
    bool cancel_requested = false;
    bool kill_sent = false;
    std::optional<double> given_time;
    std::optional<double> returned_time;

    /// Field-for-field equality; NaN equals NaN.
    bool operator==(const EnsembleRecord& other) const;
};

/// A generator's proposal for a new record.
struct PointRequest {
    std::vector<double> x;
    double priority = 0.0;
    int num_procs = 0;
    int num_gpus = 0;
    std::optional<SimId> sim_id;
};

struct SimResult {
    SimId sim_id = 0;
    double f = kNaN;
    int sim_worker = 0;
    double returned_time = 0.0;
};

class HistoryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised by History::load; carries the 1-based line of the offending input.
class HistoryParseError : public HistoryError {
public:
    HistoryParseError(const std::string& file, std::size_t line, const std::string& what);
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// The ensemble's record store. Mutated only by the manager.
///
/// sim_ids are dense: record i always has sim_id i. Status flags are
/// monotone (never reset), which the mutators enforce.
class History {
public:
    static constexpr int kFormatVersion = 1;

    explicit History(std::size_t dim = 0, double start_time = 0.0);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    SimId next_id() const noexcept { return static_cast<SimId>(records_.size()); }
    double start_time() const noexcept { return start_time_; }
    void set_start_time(double t) noexcept { start_time_ = t; }

    const std::vector<EnsembleRecord>& records() const noexcept { return records_; }
    const EnsembleRecord& at(SimId id) const;

    /// Appends one record per point. Throws HistoryError naming the index of
    /// the first offending point; on error the history is unchanged.
    std::vector<SimId> submit_points(std::span<const PointRequest> points, int gen_worker);

    /// Flags records as dispatched to `sim_worker` at time `t`.
    void mark_given(std::span<const SimId> ids, int sim_worker, double t);

    void update_with_results(std::span<const SimResult> results);

    /// Undispatched, uncancelled ids by (priority desc, sim_id asc).
    std::vector<SimId> pending_sims() const;

    /// Sets cancel_requested on all ids and returns those currently running
    /// (given and not returned), which need a kill signal.
    std::vector<SimId> mark_cancel(std::span<const SimId> ids);

    /// Records that a kill signal went out for a running record.
    void mark_kill_sent(SimId id);

    std::size_t returned_count() const noexcept { return returned_count_; }
    std::size_t given_count() const noexcept { return given_count_; }

    /// Tab-separated table at `path` plus `<path>.meta.json` sidecar.
    void dump(const std::filesystem::path& path) const;
    static History load(const std::filesystem::path& path);

    bool operator==(const History& other) const;

private:
    EnsembleRecord& mutable_at(SimId id);

    std::size_t dim_;
    double start_time_;
    std::vector<EnsembleRecord> records_;
    std::size_t returned_count_ = 0;
    std::size_t given_count_ = 0;
};

/// Equality on everything that does not depend on scheduling timing or on
/// which worker hosted the generator/simulation: ids, inputs, outputs,
/// priorities, resource requests and status flags.
bool same_content(const EnsembleRecord& a, const EnsembleRecord& b);
bool same_content(const History& a, const History& b);

std::filesystem::path meta_path_for(const std::filesystem::path& path);

}  // namespace dynens
