#pragma once

#include <memory>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dynens {

class SurrogateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Hyperparams {
    double signal_variance = 1.0;
    Eigen::VectorXd lengthscales;
};

/// Box for training, in natural (not log) units.
struct HyperBounds {
    Eigen::VectorXd ls_lo, ls_hi;
    double sv_lo = 1e-4, sv_hi = 1e4;

    void validate(std::size_t dim) const;
};

struct TrainMethod {
    enum class Kind { GLOBAL, LOCAL };
    Kind kind = Kind::LOCAL;
    int max_iter = 1;

    static TrainMethod global(int iters) { return {Kind::GLOBAL, iters}; }
    static TrainMethod local() { return {Kind::LOCAL, 1}; }
    /// "global(120)" or "local".
    std::string to_string() const;
    bool operator==(const TrainMethod&) const = default;
};

enum class MeanMode {
    zero,
    /// Constant prior mean equal to the mean of the told outputs.
    data_mean,
};

struct Posterior {
    Eigen::VectorXd mean;
    /// Latent-function variance, clipped at zero.
    Eigen::VectorXd variance;
};

/// Exact GP regression with the anisotropic squared-exponential kernel
///   k(a,b) = s * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)
/// and fixed observation noise. Rows of X are points.
class GPModel {
public:
    static constexpr int kLocalSteps = 50;

    explicit GPModel(std::size_t dim, double noise_variance = 1e-6, MeanMode mean = MeanMode::zero);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(X_.rows()); }
    double noise_variance() const noexcept { return noise_; }
    void set_noise_variance(double v);
    const Hyperparams& hyperparams() const noexcept { return hp_; }
    void set_hyperparams(const Hyperparams& hp);
    const Eigen::MatrixXd& X() const noexcept { return X_; }
    const Eigen::VectorXd& y() const noexcept { return y_; }
    double prior_mean() const noexcept { return mu0_; }
    /// Diagonal jitter the last factorization needed (0 when none).
    double jitter() const;

    /// Replaces the training data.
    void tell(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

    double kernel(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) const;
    Posterior posterior(const Eigen::MatrixXd& Q) const;

    double log_marginal_likelihood() const;
    /// At `hp`; fills `grad` (if given) with the derivative with respect to
    /// (log s, log l_1, ..., log l_n).
    double log_marginal_likelihood(const Hyperparams& hp, Eigen::VectorXd* grad = nullptr) const;

    /// Maximises the log marginal likelihood inside `bounds`. Returns the
    /// final value, which is never below the starting one.
    double train(const TrainMethod& method, const HyperBounds& bounds, std::mt19937_64& rng);

    /// Lengthscales in [1e-2, 10] x per-dimension data range, signal variance
    /// in [1e-4, 1e4] x var(y) (1 stands in for a zero range or variance).
    HyperBounds default_bounds() const;

    double rmse(const Eigen::MatrixXd& Xn, const Eigen::VectorXd& yn) const;
    /// Mean Gaussian CRPS using the predictive (latent + noise) spread.
    double crps(const Eigen::MatrixXd& Xn, const Eigen::VectorXd& yn) const;

private:
    struct Factor;
    void require_data() const;
    Factor factorize(const Hyperparams& hp, Eigen::MatrixXd* kf_out = nullptr) const;
    const Factor& cached() const;

    std::size_t dim_;
    double noise_;
    MeanMode mean_mode_;
    double mu0_ = 0.0;
    Hyperparams hp_;
    Eigen::MatrixXd X_;
    Eigen::VectorXd y_;
    mutable std::shared_ptr<Factor> cache_;
};

/// Closed-form CRPS of N(mu, sigma^2) at y; |y - mu| when sigma is 0.
double crps_gaussian(double mu, double sigma, double y);

}  // namespace dynens
