#include "dynens/app/objective.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace dynens {

SyntheticObjective::SyntheticObjective(std::size_t dim, std::uint64_t seed) : dim_(dim) {
    if (dim == 0) throw std::invalid_argument("objective dimension must be positive");
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int k = 0; k < 3; ++k) {
        Bump b;
        for (std::size_t d = 0; d < dim; ++d) {
            b.center.push_back(0.15 + 0.7 * U(rng));
            b.width.push_back(0.1 + 0.15 * U(rng));
        }
        b.height = (k == 1 ? -1.0 : 1.0) * (0.6 + 0.8 * U(rng));
        bumps_.push_back(std::move(b));
    }
    for (std::size_t d = 0; d < dim; ++d) trend_.push_back(U(rng) - 0.5);
}

double SyntheticObjective::operator()(std::span<const double> x) const {
    if (x.size() != dim_) throw std::invalid_argument("objective expects " + std::to_string(dim_) + " coordinates");
    double f = 0.0;
    for (const auto& b : bumps_) {
        double s = 0.0;
        for (std::size_t d = 0; d < dim_; ++d) {
            double z = (x[d] - b.center[d]) / b.width[d];
            s += z * z;
        }
        f += b.height * std::exp(-0.5 * s);
    }
    for (std::size_t d = 0; d < dim_; ++d) f += trend_[d] * x[d];
    return f;
}

Eigen::VectorXd SyntheticObjective::evaluate(const Eigen::MatrixXd& X) const {
    Eigen::VectorXd y(X.rows());
    std::vector<double> row(static_cast<std::size_t>(X.cols()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        for (Eigen::Index d = 0; d < X.cols(); ++d) row[static_cast<std::size_t>(d)] = X(i, d);
        y[i] = (*this)(row);
    }
    return y;
}

}  // namespace dynens
