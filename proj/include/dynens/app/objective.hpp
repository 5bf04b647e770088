#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace dynens {

/// Smooth test surface on the unit box: three anisotropic Gaussian bumps
/// plus a linear trend. Placement, widths and heights come from the seed.
class SyntheticObjective {
public:
    struct Bump {
        std::vector<double> center;
        std::vector<double> width;
        double height = 1.0;
    };

    SyntheticObjective(std::size_t dim, std::uint64_t seed);

    std::size_t dim() const noexcept { return dim_; }
    const std::vector<Bump>& bumps() const noexcept { return bumps_; }
    const std::vector<double>& trend() const noexcept { return trend_; }

    double operator()(std::span<const double> x) const;
    Eigen::VectorXd evaluate(const Eigen::MatrixXd& X) const;

private:
    std::size_t dim_;
    std::vector<Bump> bumps_;
    std::vector<double> trend_;
};

}  // namespace dynens
