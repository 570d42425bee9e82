#ifndef MCMIL_NUMERICS_HPP
#define MCMIL_NUMERICS_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "mcmil/error.hpp"

namespace mcmil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// SplitMix64 finalizer over (seed, stream); used to derive independent
/// per-bag / per-worker seeds that do not depend on scheduling.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

/// Caller-owned random stream. Identical (seed, stream) and identical call
/// sequences give identical outputs. Not shareable across threads; use
/// fork() to hand each worker its own stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    double uniform();  // [0, 1)
    double normal();   // N(0, 1)
    std::uint64_t next_u64();
    std::size_t uniform_index(std::size_t n);  // [0, n)

    Rng fork(std::uint64_t stream) const;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

struct Cholesky {
    Matrix lower;
    double jitter = 0.0;  // diagonal shift that was actually applied
};

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
/// Zero pivots with a vanishing remainder column are accepted, so singular
/// PSD input (e.g. an all-zero covariance) factors without jitter. On a
/// negative pivot the diagonal shift escalates x10 from `jitter` (floor
/// 1e-12) and gives up past 1e-2.
Cholesky cholesky_psd(const Matrix& m, double jitter = 0.0);

std::vector<Vector> sample_mvn(const Vector& mean, const Matrix& cov, std::size_t n, Rng& rng);

/// mean + L * eps for a precomputed factor.
Vector sample_mvn_factor(const Vector& mean, const Matrix& lower, Rng& rng);

/// max_k |analytic_k - central_diff_k| / max(1, |analytic_k|).
double grad_check(const std::function<double(const Vector&)>& f, const Vector& x,
                  const Vector& analytic_grad, double eps = 1e-5);

bool all_finite(const Matrix& m) noexcept;

/// Splits [0, n) into contiguous chunks over up to `threads` workers. fn(i)
/// must only write to slot i of its outputs; callers reduce in index order.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const std::size_t workers =
        std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                const std::size_t begin = w * chunk;
                const std::size_t end = std::min(n, begin + chunk);
                for (std::size_t i = begin; i < end; ++i) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace mcmil

#endif
