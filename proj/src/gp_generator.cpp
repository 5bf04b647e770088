#include "dynens/gp_generator.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace dynens {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

void check_box(const VectorXd& lb, const VectorXd& ub) {
    if (lb.size() == 0 || lb.size() != ub.size()) throw GeneratorError("lb and ub must be nonempty and equally long");
    for (Eigen::Index d = 0; d < lb.size(); ++d)
        if (!(lb[d] < ub[d])) throw GeneratorError("lb must be below ub in every dimension");
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

Batch to_batch(const MatrixXd& P) {
    Batch b(static_cast<std::size_t>(P.rows()));
    for (Eigen::Index i = 0; i < P.rows(); ++i)
        for (Eigen::Index d = 0; d < P.cols(); ++d) b[static_cast<std::size_t>(i)].x.push_back(P(i, d));
    return b;
}

}  // namespace

CandidateGrid CandidateGrid::make(const VectorXd& lb, const VectorXd& ub, int points_per_dim) {
    check_box(lb, ub);
    if (points_per_dim < 2) throw GeneratorError("points_per_dim must be at least 2");
    const Eigen::Index n = lb.size();
    double total = std::pow(static_cast<double>(points_per_dim), static_cast<double>(n));
    if (total > 2e7) throw GeneratorError("candidate grid of " + fmt(total) + " points is too large");
    CandidateGrid g{lb, ub, points_per_dim, MatrixXd(static_cast<Eigen::Index>(total), n)};
    std::vector<int> idx(static_cast<std::size_t>(n), 0);
    for (Eigen::Index row = 0; row < g.points.rows(); ++row) {
        for (Eigen::Index d = 0; d < n; ++d) {
            int k = idx[static_cast<std::size_t>(d)];
            // Endpoints exactly, interior by linear interpolation.
            g.points(row, d) = k == points_per_dim - 1
                                   ? ub[d]
                                   : lb[d] + (ub[d] - lb[d]) * static_cast<double>(k) / (points_per_dim - 1);
        }
        for (std::size_t d = 0; d < idx.size(); ++d) {
            if (++idx[d] < points_per_dim) break;
            idx[d] = 0;
        }
    }
    return g;
}

MatrixXd initial_sample(const VectorXd& lb, const VectorXd& ub, std::size_t b, std::mt19937_64& rng) {
    check_box(lb, ub);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    MatrixXd P(static_cast<Eigen::Index>(b), lb.size());
    for (Eigen::Index i = 0; i < P.rows(); ++i)
        for (Eigen::Index d = 0; d < P.cols(); ++d) P(i, d) = lb[d] + U(rng) * (ub[d] - lb[d]);
    return P;
}

SelectionParams SelectionParams::defaults(const VectorXd& lb, const VectorXd& ub, std::size_t b) {
    check_box(lb, ub);
    double diag = (ub - lb).norm();
    return SelectionParams{b, diag / 2.0, 0.5, diag / 1024.0};
}

void SelectionParams::validate() const {
    if (batch_size < 1) throw GeneratorError("batch_size must be at least 1");
    if (!(r_initial > 0) || !(r_min > 0) || !(r_min < r_initial))
        throw GeneratorError("need 0 < r_min < r_initial");
    if (!(r_decay > 0 && r_decay < 1)) throw GeneratorError("r_decay must lie in (0, 1)");
}

Selection select_batch(const CandidateGrid& grid, const VectorXd& variances, const SelectionParams& params,
                       const MatrixXd& exclude) {
    params.validate();
    const std::size_t N = grid.size();
    if (static_cast<std::size_t>(variances.size()) != N)
        throw GeneratorError("variances has " + std::to_string(variances.size()) + " entries for " +
                             std::to_string(N) + " candidates");
    if (exclude.rows() > 0 && exclude.cols() != grid.points.cols())
        throw GeneratorError("excluded points have the wrong dimension");

    std::vector<char> blocked(N, 0);
    for (std::size_t i = 0; i < N; ++i)
        for (Eigen::Index e = 0; e < exclude.rows(); ++e)
            if (grid.points.row(static_cast<Eigen::Index>(i)) == exclude.row(e)) {
                blocked[i] = 1;
                break;
            }
    std::size_t available = N - static_cast<std::size_t>(std::count(blocked.begin(), blocked.end(), 1));
    if (available < params.batch_size)
        throw GeneratorError("only " + std::to_string(available) + " candidates left for a batch of " +
                             std::to_string(params.batch_size));

    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return variances[a] > variances[b]; });

    Selection out;
    auto far_enough = [&](std::size_t i, double r) {
        auto p = grid.points.row(static_cast<Eigen::Index>(i));
        for (std::size_t a : out.indices)
            if ((grid.points.row(static_cast<Eigen::Index>(a)) - p).norm() < r) return false;
        for (Eigen::Index e = 0; e < exclude.rows(); ++e)
            if ((exclude.row(e) - p).norm() < r) return false;
        return true;
    };

    double r = params.r_initial;
    while (out.indices.size() < params.batch_size) {
        for (std::size_t i : order) {
            if (blocked[i]) continue;
            if (!far_enough(i, r)) continue;
            out.indices.push_back(i);
            out.r_trace.push_back(r);
            blocked[i] = 1;
            if (out.indices.size() == params.batch_size) break;
        }
        if (out.indices.size() == params.batch_size) break;
        r *= params.r_decay;
        if (r < params.r_min) {
            for (std::size_t i : order) {
                if (out.indices.size() == params.batch_size) break;
                if (blocked[i]) continue;
                out.indices.push_back(i);
                out.r_trace.push_back(0.0);
                blocked[i] = 1;
            }
        }
    }
    return out;
}

void TrainingPolicy::validate() const {
    if (!(full_factor > reduced_factor && reduced_factor > 0))
        throw GeneratorError("need full_factor > reduced_factor > 0");
    if (full_iters < 1 || reduced_iters < 1) throw GeneratorError("training iterations must be at least 1");
}

TrainMethod decide_training(double rmse, double std_y, const TrainingPolicy& policy) {
    if (rmse > policy.full_factor * std_y) return TrainMethod::global(policy.full_iters);
    if (rmse > policy.reduced_factor * std_y) return TrainMethod::global(policy.reduced_iters);
    return policy.allow_local ? TrainMethod::local() : TrainMethod::global(policy.reduced_iters);
}

double population_std(const VectorXd& v) {
    if (v.size() == 0) return 0.0;
    double m = v.mean();
    return std::sqrt((v.array() - m).square().mean());
}

ModelMetrics metrics(const GPModel& model, const MatrixXd& X_test, const VectorXd& y_test, const CandidateGrid& grid) {
    if (X_test.rows() == 0) throw GeneratorError("empty test set");
    ModelMetrics m;
    double r = model.rmse(X_test, y_test);
    m.mse_test = r * r;
    auto p = model.posterior(grid.points);
    m.mean_var = p.variance.mean();
    m.max_var = p.variance.maxCoeff();
    return m;
}

std::string metrics_header() {
    return "iteration,n_train,rmse_batch,train_method,train_seconds,select_seconds,sim_seconds,mse_test,mean_var,"
           "max_var";
}

std::string to_csv(const MetricsRow& r) {
    return std::to_string(r.iteration) + "," + std::to_string(r.n_train) + "," + fmt(r.rmse_batch) + "," +
           r.train_method + "," + fmt(r.train_seconds) + "," + fmt(r.select_seconds) + "," + fmt(r.sim_seconds) +
           "," + fmt(r.mse_test) + "," + fmt(r.mean_var) + "," + fmt(r.max_var);
}

GpGenResult gp_gen_loop(PersistentPort& port, const GpGenConfig& cfg, std::mt19937_64& rng) {
    check_box(cfg.lb, cfg.ub);
    cfg.policy.validate();
    if (cfg.batch_size < 1) throw GeneratorError("batch_size must be at least 1");
    const std::size_t n = static_cast<std::size_t>(cfg.lb.size());
    const auto grid = CandidateGrid::make(cfg.lb, cfg.ub, cfg.points_per_dim);
    const auto sel = cfg.selection.value_or(SelectionParams::defaults(cfg.lb, cfg.ub, cfg.batch_size));
    const bool have_test = cfg.X_test.rows() > 0;

    std::ofstream csv;
    if (cfg.metrics_path) {
        if (cfg.metrics_path->has_parent_path()) std::filesystem::create_directories(cfg.metrics_path->parent_path());
        csv.open(*cfg.metrics_path, std::ios::trunc);
        if (!csv) throw GeneratorError("cannot write metrics to " + cfg.metrics_path->string());
        csv << metrics_header() << '\n' << std::flush;
    }

    GpGenResult result;
    GPModel model(n, 1e-6, MeanMode::data_mean);
    bool noise_set = false;
    MatrixXd X_all(0, static_cast<Eigen::Index>(n));
    VectorXd y_all(0);
    int iteration = 0;

    auto exchange = [&](const MatrixXd& P, double& seconds) {
        auto t = std::chrono::steady_clock::now();
        auto r = port.send_recv(to_batch(P));
        seconds = seconds_since(t);
        return r;
    };

    double sim_seconds = 0.0;
    auto [tag, res] = exchange(initial_sample(cfg.lb, cfg.ub, cfg.batch_size, rng), sim_seconds);

    while (!is_stop(tag)) {
        std::vector<const Point*> valid;
        for (const auto& p : res)
            if (!std::isnan(p.f)) valid.push_back(&p);
        if (valid.empty()) {
            std::tie(tag, res) = exchange(initial_sample(cfg.lb, cfg.ub, cfg.batch_size, rng), sim_seconds);
            continue;
        }
        ++iteration;

        MatrixXd Xn(static_cast<Eigen::Index>(valid.size()), static_cast<Eigen::Index>(n));
        VectorXd yn(static_cast<Eigen::Index>(valid.size()));
        for (std::size_t i = 0; i < valid.size(); ++i) {
            if (valid[i]->x.size() != n) throw GeneratorError("result with wrong dimension");
            for (std::size_t d = 0; d < n; ++d) Xn(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = valid[i]->x[d];
            yn[static_cast<Eigen::Index>(i)] = valid[i]->f;
        }

        if (!noise_set) {
            double s = 0.01 * yn.cwiseAbs().mean();
            model.set_noise_variance(s * s > 0 ? s * s : 1e-10);
            noise_set = true;
        }

        const bool first = model.size() == 0;
        // Before any data the model predicts its zero prior mean.
        double rmse_batch =
            first ? std::sqrt(yn.squaredNorm() / static_cast<double>(yn.size())) : model.rmse(Xn, yn);

        MatrixXd Xa(X_all.rows() + Xn.rows(), static_cast<Eigen::Index>(n));
        Xa << X_all, Xn;
        VectorXd ya(y_all.size() + yn.size());
        ya << y_all, yn;
        X_all = std::move(Xa);
        y_all = std::move(ya);
        model.tell(X_all, y_all);

        TrainMethod method = first ? TrainMethod::global(cfg.policy.full_iters)
                                   : decide_training(rmse_batch, population_std(y_all), cfg.policy);
        if (first) {
            Hyperparams hp;
            double v = population_std(y_all);
            hp.signal_variance = v > 0 ? v * v : 1.0;
            hp.lengthscales = (cfg.ub - cfg.lb) / 2.0;
            model.set_hyperparams(hp);
        }
        auto t_train = std::chrono::steady_clock::now();
        model.train(method, model.default_bounds(), rng);
        double train_seconds = seconds_since(t_train);

        auto t_select = std::chrono::steady_clock::now();
        auto post = model.posterior(grid.points);
        MatrixXd next;
        if (cfg.mode == SelectionMode::variance) {
            auto pick = select_batch(grid, post.variance, sel, X_all);
            next.resize(static_cast<Eigen::Index>(pick.indices.size()), static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < pick.indices.size(); ++i)
                next.row(static_cast<Eigen::Index>(i)) = grid.points.row(static_cast<Eigen::Index>(pick.indices[i]));
        } else {
            next = initial_sample(cfg.lb, cfg.ub, cfg.batch_size, rng);
        }
        double select_seconds = seconds_since(t_select);

        MetricsRow row;
        row.iteration = iteration;
        row.n_train = model.size();
        row.rmse_batch = rmse_batch;
        row.train_method = method.to_string();
        row.train_seconds = train_seconds;
        row.select_seconds = select_seconds;
        row.sim_seconds = sim_seconds;
        if (have_test) {
            double r = model.rmse(cfg.X_test, cfg.y_test);
            row.mse_test = r * r;
        } else {
            row.mse_test = std::nan("");
        }
        row.mean_var = post.variance.mean();
        row.max_var = post.variance.maxCoeff();
        result.rows.push_back(row);
        if (csv.is_open()) csv << to_csv(row) << '\n' << std::flush;
        result.model_size = model.size();

        if (cfg.max_batches && iteration >= *cfg.max_batches) return result;
        std::tie(tag, res) = exchange(next, sim_seconds);
    }
    return result;
}

}  // namespace dynens
