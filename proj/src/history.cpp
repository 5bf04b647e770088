#include "dynens/history.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace dynens {

namespace {

bool same_double(double a, double b) {
    if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
    return a == b;
}

bool same_opt(const std::optional<double>& a, const std::optional<double>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || same_double(*a, *b);
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

std::vector<std::string> header_fields(std::size_t dim) {
    std::vector<std::string> h{"sim_id"};
    for (std::size_t d = 0; d < dim; ++d) h.push_back("x" + std::to_string(d));
    for (const char* name : {"f", "priority", "num_procs", "num_gpus", "gen_worker", "sim_worker",
                             "given", "returned", "cancel_requested", "kill_sent", "given_time",
                             "returned_time"}) {
        h.emplace_back(name);
    }
    return h;
}

class RowReader {
public:
    RowReader(const std::string& file, std::size_t line, std::vector<std::string_view> cells)
        : file_(file), line_(line), cells_(std::move(cells)) {}

    double real() {
        auto cell = next();
        if (cell == "nan") return kNaN;
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc{} || ptr != cell.data() + cell.size()) fail("bad real '" + std::string(cell) + "'");
        return v;
    }

    std::optional<double> opt_real() {
        if (peek() == "-") {
            ++pos_;
            return std::nullopt;
        }
        return real();
    }

    long long integer() {
        auto cell = next();
        long long v = 0;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc{} || ptr != cell.data() + cell.size()) fail("bad integer '" + std::string(cell) + "'");
        return v;
    }

    std::optional<int> opt_int() {
        if (peek() == "-") {
            ++pos_;
            return std::nullopt;
        }
        return static_cast<int>(integer());
    }

    bool flag() {
        auto cell = next();
        if (cell == "0") return false;
        if (cell == "1") return true;
        fail("bad flag '" + std::string(cell) + "'");
    }

    [[noreturn]] void fail(const std::string& what) const { throw HistoryParseError(file_, line_, what); }

private:
    std::string_view peek() const { return pos_ < cells_.size() ? cells_[pos_] : std::string_view{}; }
    std::string_view next() { return cells_.at(pos_++); }

    const std::string& file_;
    std::size_t line_;
    std::vector<std::string_view> cells_;
    std::size_t pos_ = 0;
};

}  // namespace

bool EnsembleRecord::operator==(const EnsembleRecord& o) const {
    if (x.size() != o.x.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!same_double(x[i], o.x[i])) return false;
    return sim_id == o.sim_id && same_double(f, o.f) && same_double(priority, o.priority) &&
           num_procs == o.num_procs && num_gpus == o.num_gpus && gen_worker == o.gen_worker &&
           sim_worker == o.sim_worker && given == o.given && returned == o.returned &&
           cancel_requested == o.cancel_requested && kill_sent == o.kill_sent &&
           same_opt(given_time, o.given_time) && same_opt(returned_time, o.returned_time);
}

HistoryParseError::HistoryParseError(const std::string& file, std::size_t line, const std::string& what)
    : HistoryError(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

History::History(std::size_t dim, double start_time) : dim_(dim), start_time_(start_time) {}

const EnsembleRecord& History::at(SimId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= records_.size())
        throw HistoryError("unknown sim_id " + std::to_string(id));
    return records_[static_cast<std::size_t>(id)];
}

EnsembleRecord& History::mutable_at(SimId id) {
    return const_cast<EnsembleRecord&>(std::as_const(*this).at(id));
}

std::vector<SimId> History::submit_points(std::span<const PointRequest> points, int gen_worker) {
    // Validate everything first so a rejected batch leaves no trace.
    SimId expected = next_id();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        if (p.x.size() != dim_) {
            throw HistoryError("point " + std::to_string(i) + ": dimension " + std::to_string(p.x.size()) +
                               " != " + std::to_string(dim_));
        }
        if (p.num_procs < 0 || p.num_gpus < 0)
            throw HistoryError("point " + std::to_string(i) + ": negative resource request");
        if (p.sim_id && *p.sim_id != expected) {
            throw HistoryError("point " + std::to_string(i) + ": explicit sim_id " + std::to_string(*p.sim_id) +
                               " is not the next unassigned id " + std::to_string(expected));
        }
        ++expected;
    }

    std::vector<SimId> ids;
    ids.reserve(points.size());
    for (const auto& p : points) {
        EnsembleRecord r;
        r.sim_id = next_id();
        r.x = p.x;
        r.priority = p.priority;
        r.num_procs = p.num_procs;
        r.num_gpus = p.num_gpus;
        r.gen_worker = gen_worker;
        ids.push_back(r.sim_id);
        records_.push_back(std::move(r));
    }
    return ids;
}

void History::mark_given(std::span<const SimId> ids, int sim_worker, double t) {
    for (SimId id : ids) {
        const auto& r = at(id);
        if (r.given) throw HistoryError("sim_id " + std::to_string(id) + " already given");
        if (r.cancel_requested) throw HistoryError("sim_id " + std::to_string(id) + " is cancelled");
    }
    for (SimId id : ids) {
        auto& r = mutable_at(id);
        r.given = true;
        r.sim_worker = sim_worker;
        r.given_time = t;
        ++given_count_;
    }
}

void History::update_with_results(std::span<const SimResult> results) {
    for (std::size_t i = 0; i < results.size(); ++i) {
        SimId id = results[i].sim_id;
        const auto& r = at(id);
        if (!r.given) throw HistoryError("sim_id " + std::to_string(id) + " was never given");
        if (r.returned) throw HistoryError("sim_id " + std::to_string(id) + " already returned");
        for (std::size_t j = 0; j < i; ++j)
            if (results[j].sim_id == id) throw HistoryError("sim_id " + std::to_string(id) + " returned twice");
    }
    for (const auto& res : results) {
        auto& r = mutable_at(res.sim_id);
        r.f = res.f;
        r.returned = true;
        r.sim_worker = res.sim_worker;
        r.returned_time = std::max(res.returned_time, r.given_time.value_or(res.returned_time));
        ++returned_count_;
    }
}

std::vector<SimId> History::pending_sims() const {
    std::vector<SimId> out;
    for (const auto& r : records_)
        if (!r.given && !r.cancel_requested) out.push_back(r.sim_id);
    std::stable_sort(out.begin(), out.end(), [this](SimId a, SimId b) {
        return records_[static_cast<std::size_t>(a)].priority > records_[static_cast<std::size_t>(b)].priority;
    });
    return out;
}

std::vector<SimId> History::mark_cancel(std::span<const SimId> ids) {
    for (SimId id : ids) at(id);
    std::vector<SimId> running;
    for (SimId id : ids) {
        auto& r = mutable_at(id);
        r.cancel_requested = true;
        if (r.given && !r.returned && !r.kill_sent &&
            std::find(running.begin(), running.end(), id) == running.end())
            running.push_back(id);
    }
    return running;
}

void History::mark_kill_sent(SimId id) {
    auto& r = mutable_at(id);
    if (!r.cancel_requested) throw HistoryError("kill for uncancelled sim_id " + std::to_string(id));
    r.kill_sent = true;
}

std::filesystem::path meta_path_for(const std::filesystem::path& path) {
    auto p = path;
    p += ".meta.json";
    return p;
}

void History::dump(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());

    // Write to temporaries and rename so an interrupted dump never leaves a
    // half-written table next to a valid sidecar.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw HistoryError("cannot write " + tmp.string());
        auto header = header_fields(dim_);
        for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "\t" : "") << header[i];
        out << '\n';
        for (const auto& r : records_) {
            out << r.sim_id;
            for (double v : r.x) out << '\t' << format_double(v);
            out << '\t' << format_double(r.f) << '\t' << format_double(r.priority) << '\t' << r.num_procs << '\t'
                << r.num_gpus << '\t' << r.gen_worker << '\t'
                << (r.sim_worker ? std::to_string(*r.sim_worker) : std::string("-")) << '\t' << int(r.given)
                << '\t' << int(r.returned) << '\t' << int(r.cancel_requested) << '\t' << int(r.kill_sent) << '\t'
                << (r.given_time ? format_double(*r.given_time) : std::string("-")) << '\t'
                << (r.returned_time ? format_double(*r.returned_time) : std::string("-")) << '\n';
        }
        if (!out) throw HistoryError("write failed: " + tmp.string());
    }
    auto meta_tmp = meta_path_for(tmp);
    {
        nlohmann::json meta = {{"format_version", kFormatVersion},
                               {"dim", dim_},
                               {"start_time", start_time_},
                               {"num_records", records_.size()}};
        std::ofstream out(meta_tmp, std::ios::trunc);
        out << meta.dump(2) << '\n';
        if (!out) throw HistoryError("write failed: " + meta_tmp.string());
    }
    std::filesystem::rename(tmp, path);
    std::filesystem::rename(meta_tmp, meta_path_for(path));
}

History History::load(const std::filesystem::path& path) {
    const std::string file = path.string();
    auto meta_file = meta_path_for(path);
    std::ifstream meta_in(meta_file);
    if (!meta_in) throw HistoryParseError(meta_file.string(), 0, "missing metadata sidecar");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::parse_error& e) {
        throw HistoryParseError(meta_file.string(), 0, e.what());
    }
    if (meta.value("format_version", -1) != kFormatVersion)
        throw HistoryParseError(meta_file.string(), 0, "unsupported format_version");
    const auto dim = meta.at("dim").get<std::size_t>();
    const auto expected_rows = meta.at("num_records").get<std::size_t>();
    History h(dim, meta.at("start_time").get<double>());

    std::ifstream in(path, std::ios::binary);
    if (!in) throw HistoryParseError(file, 0, "cannot open");
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    if (text.empty()) throw HistoryParseError(file, 1, "missing header");
    if (text.back() != '\n') throw HistoryParseError(file, 0, "truncated file (no trailing newline)");

    const auto header = header_fields(dim);
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto eol = text.find('\n', pos);
        std::string_view line(text.data() + pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        auto cells = split_tabs(line);
        if (cells.size() != header.size()) {
            throw HistoryParseError(file, line_no,
                                    "expected " + std::to_string(header.size()) + " fields, got " +
                                        std::to_string(cells.size()));
        }
        if (line_no == 1) {
            for (std::size_t i = 0; i < header.size(); ++i)
                if (cells[i] != header[i]) throw HistoryParseError(file, 1, "unexpected column '" + std::string(cells[i]) + "'");
            continue;
        }
        RowReader row(file, line_no, std::move(cells));
        EnsembleRecord r;
        r.sim_id = row.integer();
        if (r.sim_id != h.next_id()) row.fail("sim_id " + std::to_string(r.sim_id) + " out of sequence");
        r.x.resize(dim);
        for (auto& v : r.x) v = row.real();
        r.f = row.real();
        r.priority = row.real();
        r.num_procs = static_cast<int>(row.integer());
        r.num_gpus = static_cast<int>(row.integer());
        r.gen_worker = static_cast<int>(row.integer());
        r.sim_worker = row.opt_int();
        r.given = row.flag();
        r.returned = row.flag();
        r.cancel_requested = row.flag();
        r.kill_sent = row.flag();
        r.given_time = row.opt_real();
        r.returned_time = row.opt_real();
        if ((r.returned && !r.given) || (r.kill_sent && !r.cancel_requested))
            row.fail("inconsistent status flags");
        h.given_count_ += r.given;
        h.returned_count_ += r.returned;
        h.records_.push_back(std::move(r));
    }
    if (line_no == 0) throw HistoryParseError(file, 1, "missing header");
    if (h.records_.size() != expected_rows) {
        throw HistoryParseError(file, line_no,
                                "truncated: " + std::to_string(h.records_.size()) + " of " +
                                    std::to_string(expected_rows) + " records");
    }
    return h;
}

bool History::operator==(const History& other) const {
    return dim_ == other.dim_ && same_double(start_time_, other.start_time_) && records_ == other.records_;
}

bool same_content(const EnsembleRecord& a, const EnsembleRecord& b) {
    if (a.x.size() != b.x.size()) return false;
    for (std::size_t i = 0; i < a.x.size(); ++i)
        if (!same_double(a.x[i], b.x[i])) return false;
    return a.sim_id == b.sim_id && same_double(a.f, b.f) && same_double(a.priority, b.priority) &&
           a.num_procs == b.num_procs && a.num_gpus == b.num_gpus && a.given == b.given &&
           a.returned == b.returned && a.cancel_requested == b.cancel_requested && a.kill_sent == b.kill_sent;
}

bool same_content(const History& a, const History& b) {
    if (a.dim() != b.dim() || a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!same_content(a.records()[i], b.records()[i])) return false;
    return true;
}

}  // namespace dynens
