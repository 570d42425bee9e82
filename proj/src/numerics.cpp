#include "mcmil/numerics.hpp"

#include <cmath>
#include <sstream>

namespace mcmil {

const char* to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::dimension: return "dimension";
        case ErrorCode::not_psd: return "not_psd";
        case ErrorCode::evaluation: return "evaluation";
        case ErrorCode::spec: return "spec";
        case ErrorCode::empty_bag: return "empty_bag";
        case ErrorCode::degenerate_head: return "degenerate_head";
        case ErrorCode::parameter: return "parameter";
        case ErrorCode::undefined: return "undefined";
        case ErrorCode::label: return "label";
        case ErrorCode::no_discordance: return "no_discordance";
        case ErrorCode::degenerate_table: return "degenerate_table";
        case ErrorCode::degenerate_scatter: return "degenerate_scatter";
        case ErrorCode::zero_variance: return "zero_variance";
        case ErrorCode::empty_input: return "empty_input";
        case ErrorCode::diverged: return "diverged";
        case ErrorCode::io: return "io";
        case ErrorCode::config: return "config";
    }
    return "unknown";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(derive_seed(seed, stream)) {}

double Rng::uniform() { return uniform_(engine_); }

double Rng::normal() { return normal_(engine_); }

std::uint64_t Rng::next_u64() { return engine_(); }

std::size_t Rng::uniform_index(std::size_t n) {
    require(n > 0, ErrorCode::parameter, "uniform_index: n must be positive");
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
}

Rng Rng::fork(std::uint64_t stream) const {
    return Rng(derive_seed(seed_, stream_), stream);
}

namespace {

// Returns false on a negative pivot (or a nonzero column under a zero pivot).
bool try_cholesky(const Matrix& a, Matrix& l) {
    const Eigen::Index n = a.rows();
    l.setZero(n, n);
    const double scale = std::max(1.0, a.diagonal().cwiseAbs().maxCoeff());
    const double tol = 1e-13 * scale;
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = a(j, j) - l.row(j).head(j).squaredNorm();
        if (d > tol) {
            const double ljj = std::sqrt(d);
            l(j, j) = ljj;
            for (Eigen::Index i = j + 1; i < n; ++i) {
                l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / ljj;
            }
        } else if (d >= -tol) {
            for (Eigen::Index i = j + 1; i < n; ++i) {
                const double r = a(i, j) - l.row(i).head(j).dot(l.row(j).head(j));
                if (std::abs(r) > std::sqrt(tol) * std::sqrt(scale)) {
                    return false;
                }
            }
        } else {
            return false;
        }
    }
    return true;
}

}  // namespace

Cholesky cholesky_psd(const Matrix& m, double jitter) {
    require(m.rows() == m.cols(), ErrorCode::dimension, "cholesky_psd: matrix must be square");
    require(all_finite(m), ErrorCode::evaluation, "cholesky_psd: non-finite entry");
    require(jitter >= 0.0, ErrorCode::parameter, "cholesky_psd: jitter must be >= 0");
    const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
    require(m.size() == 0 || asym <= 1e-10, ErrorCode::dimension,
            "cholesky_psd: matrix is not symmetric");

    constexpr double kCap = 1e-2;
    const Eigen::Index n = m.rows();
    Matrix l;
    double shift = jitter;
    while (true) {
        Matrix a = m;
        a.diagonal().array() += shift;
        if (try_cholesky(a, l)) {
            return {l, shift};
        }
        shift = shift > 0.0 ? shift * 10.0 : 1e-12;
        if (shift > kCap * (1.0 + 1e-12)) {
            std::ostringstream os;
            os << "cholesky_psd: " << n << "x" << n
               << " matrix not PSD within jitter cap 1e-2";
            fail(ErrorCode::not_psd, os.str());
        }
    }
}

Vector sample_mvn_factor(const Vector& mean, const Matrix& lower, Rng& rng) {
    Vector eps(mean.size());
    for (Eigen::Index i = 0; i < eps.size(); ++i) {
        eps[i] = rng.normal();
    }
    return mean + lower * eps;
}

std::vector<Vector> sample_mvn(const Vector& mean, const Matrix& cov, std::size_t n, Rng& rng) {
    require(cov.rows() == mean.size() && cov.cols() == mean.size(), ErrorCode::dimension,
            "sample_mvn: covariance does not match mean dimension");
    const Cholesky chol = cholesky_psd(cov, 0.0);
    std::vector<Vector> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(sample_mvn_factor(mean, chol.lower, rng));
    }
    return out;
}

double grad_check(const std::function<double(const Vector&)>& f, const Vector& x,
                  const Vector& analytic_grad, double eps) {
    require(analytic_grad.size() == x.size(), ErrorCode::dimension,
            "grad_check: gradient length differs from x");
    require(eps >= 1e-7 && eps <= 1e-3, ErrorCode::parameter, "grad_check: eps outside [1e-7, 1e-3]");
    double worst = 0.0;
    Vector probe = x;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        probe[k] = x[k] + eps;
        const double up = f(probe);
        probe[k] = x[k] - eps;
        const double down = f(probe);
        probe[k] = x[k];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            fail(ErrorCode::evaluation, "grad_check: non-finite function value");
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double err =
            std::abs(analytic_grad[k] - numeric) / std::max(1.0, std::abs(analytic_grad[k]));
        worst = std::max(worst, err);
    }
    return worst;
}

bool all_finite(const Matrix& m) noexcept { return m.allFinite(); }

}  // namespace mcmil
