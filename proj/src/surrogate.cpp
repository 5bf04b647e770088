#include "dynens/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace dynens {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kJitterLadder[] = {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6};
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double range_or_one(const Eigen::Ref<const VectorXd>& v) {
    if (v.size() == 0) return 1.0;
    double r = v.maxCoeff() - v.minCoeff();
    return r > 0 ? r : 1.0;
}

double variance_of(const VectorXd& y) {
    if (y.size() == 0) return 0.0;
    double m = y.mean();
    return (y.array() - m).square().mean();
}

}  // namespace

struct GPModel::Factor {
    Eigen::LLT<MatrixXd> llt;
    VectorXd alpha;
    double jitter = 0.0;
};

void HyperBounds::validate(std::size_t dim) const {
    if (static_cast<std::size_t>(ls_lo.size()) != dim || static_cast<std::size_t>(ls_hi.size()) != dim)
        throw SurrogateError("lengthscale bounds must have one entry per dimension");
    auto ok = [](double lo, double hi) { return std::isfinite(lo) && std::isfinite(hi) && lo > 0 && hi >= lo; };
    if (!ok(sv_lo, sv_hi)) throw SurrogateError("signal variance bounds must be positive, finite and ordered");
    for (std::size_t d = 0; d < dim; ++d)
        if (!ok(ls_lo[d], ls_hi[d]))
            throw SurrogateError("lengthscale bounds for dimension " + std::to_string(d) +
                                 " must be positive, finite and ordered");
}

std::string TrainMethod::to_string() const {
    return kind == Kind::GLOBAL ? "global(" + std::to_string(max_iter) + ")" : "local";
}

GPModel::GPModel(std::size_t dim, double noise_variance, MeanMode mean)
    : dim_(dim), noise_(noise_variance), mean_mode_(mean), X_(0, dim) {
    if (dim == 0) throw SurrogateError("dimension must be positive");
    if (!(noise_variance >= 0) || !std::isfinite(noise_variance)) throw SurrogateError("noise variance must be >= 0");
    hp_.lengthscales = VectorXd::Ones(static_cast<Eigen::Index>(dim));
}

void GPModel::set_noise_variance(double v) {
    if (!(v >= 0) || !std::isfinite(v)) throw SurrogateError("noise variance must be >= 0");
    noise_ = v;
    cache_.reset();
}

void GPModel::set_hyperparams(const Hyperparams& hp) {
    if (static_cast<std::size_t>(hp.lengthscales.size()) != dim_)
        throw SurrogateError("expected " + std::to_string(dim_) + " lengthscales");
    if (!(hp.signal_variance > 0) || !(hp.lengthscales.array() > 0).all())
        throw SurrogateError("hyperparameters must be positive");
    hp_ = hp;
    cache_.reset();
}

void GPModel::tell(const MatrixXd& X, const VectorXd& y) {
    if (static_cast<std::size_t>(X.cols()) != dim_)
        throw SurrogateError("points have " + std::to_string(X.cols()) + " columns, model dimension is " +
                             std::to_string(dim_));
    if (X.rows() != y.size()) throw SurrogateError("X and y disagree on the number of points");
    if (X.rows() == 0) throw SurrogateError("tell needs at least one point");
    for (Eigen::Index i = 0; i < y.size(); ++i)
        if (!std::isfinite(y[i])) throw SurrogateError("non-finite output at row " + std::to_string(i));
    if (!X.allFinite()) throw SurrogateError("non-finite input");
    X_ = X;
    y_ = y;
    mu0_ = mean_mode_ == MeanMode::data_mean ? y.mean() : 0.0;
    cache_.reset();
}

void GPModel::require_data() const {
    if (X_.rows() == 0) throw SurrogateError("model has no data; call tell first");
}

double GPModel::kernel(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b) const {
    double s = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) {
        double z = (a[d] - b[d]) / hp_.lengthscales[d];
        s += z * z;
    }
    return hp_.signal_variance * std::exp(-0.5 * s);
}

GPModel::Factor GPModel::factorize(const Hyperparams& hp, MatrixXd* kf_out) const {
    const Eigen::Index m = X_.rows();
    MatrixXd Z = X_.array().rowwise() / hp.lengthscales.transpose().array();
    MatrixXd Kf(m, m);
    for (Eigen::Index j = 0; j < m; ++j) {
        Kf(j, j) = hp.signal_variance;
        for (Eigen::Index i = j + 1; i < m; ++i)
            Kf(i, j) = Kf(j, i) = hp.signal_variance * std::exp(-0.5 * (Z.row(i) - Z.row(j)).squaredNorm());
    }

    VectorXd r = y_.array() - mu0_;
    for (double j : kJitterLadder) {
        MatrixXd K = Kf;
        K.diagonal().array() += noise_ + j;
        Factor f;
        f.llt.compute(K);
        if (f.llt.info() != Eigen::Success) continue;
        f.alpha = f.llt.solve(r);
        if (!f.alpha.allFinite()) continue;
        f.jitter = j;
        if (kf_out) *kf_out = std::move(Kf);
        return f;
    }
    throw SurrogateError("kernel matrix is not positive definite even with jitter 1e-6");
}

const GPModel::Factor& GPModel::cached() const {
    require_data();
    if (!cache_) cache_ = std::make_shared<Factor>(factorize(hp_));
    return *cache_;
}

double GPModel::jitter() const { return cached().jitter; }

Posterior GPModel::posterior(const MatrixXd& Q) const {
    if (static_cast<std::size_t>(Q.cols()) != dim_) throw SurrogateError("query dimension mismatch");
    const auto& f = cached();
    const Eigen::Index m = X_.rows(), q = Q.rows();
    MatrixXd Ks(m, q);
    for (Eigen::Index j = 0; j < q; ++j)
        for (Eigen::Index i = 0; i < m; ++i) Ks(i, j) = kernel(X_.row(i).transpose(), Q.row(j).transpose());
    Posterior p;
    p.mean = (Ks.transpose() * f.alpha).array() + mu0_;
    MatrixXd V = f.llt.matrixL().solve(Ks);
    p.variance = (hp_.signal_variance - V.colwise().squaredNorm().transpose().array()).cwiseMax(0.0);
    return p;
}

double GPModel::log_marginal_likelihood() const { return log_marginal_likelihood(hp_, nullptr); }

double GPModel::log_marginal_likelihood(const Hyperparams& hp, VectorXd* grad) const {
    require_data();
    if (!(hp.signal_variance > 0) || static_cast<std::size_t>(hp.lengthscales.size()) != dim_ ||
        !(hp.lengthscales.array() > 0).all())
        throw SurrogateError("hyperparameters must be positive with one lengthscale per dimension");
    MatrixXd Kf;
    Factor f = factorize(hp, grad ? &Kf : nullptr);
    const Eigen::Index m = X_.rows();
    VectorXd r = y_.array() - mu0_;
    double logdet = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
    double lml = -0.5 * r.dot(f.alpha) - 0.5 * logdet - 0.5 * static_cast<double>(m) * std::log(2.0 * std::numbers::pi);

    if (grad) {
        MatrixXd Kinv = f.llt.solve(MatrixXd::Identity(m, m));
        MatrixXd W = f.alpha * f.alpha.transpose() - Kinv;
        MatrixXd WK = W.cwiseProduct(Kf);
        grad->resize(static_cast<Eigen::Index>(dim_) + 1);
        (*grad)[0] = 0.5 * WK.sum();
        for (std::size_t d = 0; d < dim_; ++d) {
            VectorXd c = X_.col(static_cast<Eigen::Index>(d));
            double l2 = hp.lengthscales[d] * hp.lengthscales[d];
            double s = 0.0;
            for (Eigen::Index j = 0; j < m; ++j)
                for (Eigen::Index i = 0; i < m; ++i) {
                    double diff = c[i] - c[j];
                    s += WK(i, j) * diff * diff;
                }
            (*grad)[static_cast<Eigen::Index>(d) + 1] = 0.5 * s / l2;
        }
    }
    return lml;
}

HyperBounds GPModel::default_bounds() const {
    require_data();
    HyperBounds b;
    b.ls_lo.resize(static_cast<Eigen::Index>(dim_));
    b.ls_hi.resize(static_cast<Eigen::Index>(dim_));
    for (std::size_t d = 0; d < dim_; ++d) {
        double r = range_or_one(X_.col(static_cast<Eigen::Index>(d)));
        b.ls_lo[d] = 1e-2 * r;
        b.ls_hi[d] = 10.0 * r;
    }
    double v = variance_of(y_);
    if (!(v > 0)) v = 1.0;
    b.sv_lo = 1e-4 * v;
    b.sv_hi = 1e4 * v;
    return b;
}

double GPModel::train(const TrainMethod& method, const HyperBounds& bounds, std::mt19937_64& rng) {
    require_data();
    bounds.validate(dim_);
    if (method.max_iter < 1) throw SurrogateError("max_iter must be at least 1");
    const Eigen::Index p = static_cast<Eigen::Index>(dim_) + 1;

    VectorXd lo(p), hi(p);
    lo[0] = std::log(bounds.sv_lo);
    hi[0] = std::log(bounds.sv_hi);
    for (Eigen::Index d = 1; d < p; ++d) {
        lo[d] = std::log(bounds.ls_lo[d - 1]);
        hi[d] = std::log(bounds.ls_hi[d - 1]);
    }
    auto to_hp = [&](const VectorXd& t) {
        Hyperparams h;
        h.signal_variance = std::exp(t[0]);
        h.lengthscales = t.tail(p - 1).array().exp();
        return h;
    };
    auto clamp = [&](VectorXd t) { return VectorXd(t.cwiseMax(lo).cwiseMin(hi)); };
    auto value = [&](const VectorXd& t, VectorXd* g) {
        try {
            double v = log_marginal_likelihood(to_hp(t), g);
            return std::isfinite(v) ? v : kNegInf;
        } catch (const SurrogateError&) {
            return kNegInf;
        }
    };

    // Projected gradient ascent in log space with Barzilai-Borwein steps and
    // an Armijo backtracking safeguard.
    auto refine = [&](VectorXd t, int steps) {
        VectorXd g;
        double f = value(t, &g);
        if (!std::isfinite(f)) return std::pair{t, f};
        double step = 0.1;
        for (int k = 0; k < steps; ++k) {
            VectorXd pg = g;
            for (Eigen::Index i = 0; i < p; ++i)
                if ((t[i] <= lo[i] && g[i] < 0) || (t[i] >= hi[i] && g[i] > 0)) pg[i] = 0;
            if (pg.lpNorm<Eigen::Infinity>() < 1e-9) break;
            double a = step;
            VectorXd tn, gn;
            double fn = kNegInf;
            bool accepted = false;
            for (int bt = 0; bt < 40; ++bt) {
                tn = clamp(t + a * g);
                fn = value(tn, &gn);
                if (std::isfinite(fn) && fn >= f + 1e-4 * g.dot(tn - t)) {
                    accepted = true;
                    break;
                }
                a *= 0.5;
            }
            if (!accepted) break;
            VectorXd s = tn - t, yv = gn - g;
            double sy = -s.dot(yv);
            step = sy > 0 ? std::clamp(s.squaredNorm() / sy, 1e-6, 1e3) : 1.0;
            bool flat = std::abs(fn - f) <= 1e-13 * (1.0 + std::abs(f));
            t = std::move(tn);
            g = std::move(gn);
            f = fn;
            if (flat) break;
        }
        return std::pair{t, f};
    };

    VectorXd t0(p);
    t0[0] = std::log(hp_.signal_variance);
    t0.tail(p - 1) = hp_.lengthscales.array().log();
    const double start_f = value(t0, nullptr);
    t0 = clamp(t0);

    VectorXd best_t;
    double best_f = kNegInf;
    auto consider = [&](const std::pair<VectorXd, double>& r) {
        if (r.second > best_f) {
            best_f = r.second;
            best_t = r.first;
        }
    };

    if (method.kind == TrainMethod::Kind::LOCAL) {
        consider(refine(t0, kLocalSteps));
    } else {
        std::uniform_real_distribution<double> U(0.0, 1.0);
        std::vector<std::pair<double, VectorXd>> draws;
        draws.reserve(static_cast<std::size_t>(method.max_iter));
        for (int i = 0; i < method.max_iter; ++i) {
            VectorXd t(p);
            for (Eigen::Index d = 0; d < p; ++d) t[d] = lo[d] + U(rng) * (hi[d] - lo[d]);
            draws.emplace_back(value(t, nullptr), std::move(t));
        }
        std::stable_sort(draws.begin(), draws.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        consider(refine(t0, 2 * kLocalSteps));
        for (std::size_t i = 0; i < std::min<std::size_t>(3, draws.size()); ++i)
            if (std::isfinite(draws[i].first)) consider(refine(draws[i].second, 2 * kLocalSteps));
    }

    if (best_t.size() == p && best_f > start_f) {
        hp_ = to_hp(best_t);
        cache_.reset();
        return best_f;
    }
    return start_f;
}

double GPModel::rmse(const MatrixXd& Xn, const VectorXd& yn) const {
    if (Xn.rows() == 0) throw SurrogateError("rmse needs at least one point");
    if (Xn.rows() != yn.size()) throw SurrogateError("X and y disagree on the number of points");
    auto p = posterior(Xn);
    return std::sqrt((p.mean - yn).squaredNorm() / static_cast<double>(yn.size()));
}

double crps_gaussian(double mu, double sigma, double y) {
    if (!(sigma > 0)) return std::abs(y - mu);
    double z = (y - mu) / sigma;
    double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
    double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

double GPModel::crps(const MatrixXd& Xn, const VectorXd& yn) const {
    if (Xn.rows() == 0) throw SurrogateError("crps needs at least one point");
    if (Xn.rows() != yn.size()) throw SurrogateError("X and y disagree on the number of points");
    auto p = posterior(Xn);
    double s = 0.0;
    for (Eigen::Index i = 0; i < yn.size(); ++i) s += crps_gaussian(p.mean[i], std::sqrt(p.variance[i] + noise_), yn[i]);
    return s / static_cast<double>(yn.size());
}

}  // namespace dynens
