#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dynens/runtime/worker.hpp"
#include "dynens/surrogate.hpp"

namespace dynens {

class GeneratorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Cartesian mesh over [lb, ub], endpoints included. The first coordinate
/// varies fastest.
struct CandidateGrid {
    Eigen::VectorXd lb, ub;
    int points_per_dim = 0;
    Eigen::MatrixXd points;

    static CandidateGrid make(const Eigen::VectorXd& lb, const Eigen::VectorXd& ub, int points_per_dim);
    std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
};

/// b i.i.d. uniform points in the box, one per row.
Eigen::MatrixXd initial_sample(const Eigen::VectorXd& lb, const Eigen::VectorXd& ub, std::size_t b,
                               std::mt19937_64& rng);

struct SelectionParams {
    std::size_t batch_size = 1;
    double r_initial = 1.0;
    double r_decay = 0.5;
    double r_min = 1e-3;

    /// r_initial = |ub - lb| / 2, decay 0.5, r_min = |ub - lb| / 1024.
    static SelectionParams defaults(const Eigen::VectorXd& lb, const Eigen::VectorXd& ub, std::size_t b);
    void validate() const;
};

struct Selection {
    std::vector<std::size_t> indices;
    /// Separation radius in force when each index was accepted; 0 for
    /// indices filled by variance rank after r fell below r_min.
    std::vector<double> r_trace;
};

/// Greedy variance-ranked selection with a shrinking minimum separation from
/// both accepted and excluded points. Grid points equal to an excluded point
/// are never chosen.
Selection select_batch(const CandidateGrid& grid, const Eigen::VectorXd& variances, const SelectionParams& params,
                       const Eigen::MatrixXd& exclude);

struct TrainingPolicy {
    double full_factor = 10.0;
    double reduced_factor = 2.0;
    int full_iters = 120;
    int reduced_iters = 20;
    bool allow_local = true;

    void validate() const;
};

/// rmse > full_factor*std: global(full_iters); rmse > reduced_factor*std:
/// global(reduced_iters); otherwise local, or global(reduced_iters) when
/// local training is disallowed.
TrainMethod decide_training(double rmse, double std_y, const TrainingPolicy& policy);

/// Population standard deviation (divisor n).
double population_std(const Eigen::VectorXd& v);

struct ModelMetrics {
    double mse_test = 0.0;
    double mean_var = 0.0;
    double max_var = 0.0;
};

ModelMetrics metrics(const GPModel& model, const Eigen::MatrixXd& X_test, const Eigen::VectorXd& y_test,
                     const CandidateGrid& grid);

struct MetricsRow {
    int iteration = 0;
    std::size_t n_train = 0;
    double rmse_batch = 0.0;
    std::string train_method;
    double train_seconds = 0.0;
    double select_seconds = 0.0;
    double sim_seconds = 0.0;
    double mse_test = 0.0;
    double mean_var = 0.0;
    double max_var = 0.0;
};

std::string metrics_header();
std::string to_csv(const MetricsRow& r);

enum class SelectionMode {
    variance,
    /// Uniform random batches; the baseline for comparisons.
    uniform,
};

struct GpGenConfig {
    Eigen::VectorXd lb, ub;
    std::size_t batch_size = 16;
    int points_per_dim = 50;
    TrainingPolicy policy;
    std::optional<SelectionParams> selection;
    SelectionMode mode = SelectionMode::variance;
    Eigen::MatrixXd X_test;
    Eigen::VectorXd y_test;
    /// Stop after this many evaluated batches (the first, uniform one included).
    std::optional<int> max_batches;
    std::optional<std::filesystem::path> metrics_path;
};

struct GpGenResult {
    MessageTag final_tag = MessageTag::FINISHED_PERSISTENT_GEN;
    std::vector<MetricsRow> rows;
    std::size_t model_size = 0;
};

/// The online-learning loop: a uniform first batch, then per returned batch
/// drop NaN outputs, score the current model on the new points, refit, pick
/// the next batch by posterior variance, and record a metrics row.
GpGenResult gp_gen_loop(PersistentPort& port, const GpGenConfig& config, std::mt19937_64& rng);

}  // namespace dynens
