#ifndef MCMIL_BAYESOPT_HPP
#define MCMIL_BAYESOPT_HPP

#include <functional>
#include <string>
#include <vector>

#include "mcmil/numerics.hpp"

namespace mcmil {

struct SearchDim {
    std::string name;
    double lower = 0.0;
    double upper = 1.0;
    bool gaussian_prior = false;  // down-weight EI away from the box midpoint
};

struct SearchSpace {
    std::vector<SearchDim> dims;

    /// gamma, tau_m, kappa, alpha, beta; tau_con appended when requested.
    static SearchSpace margin_defaults(bool include_tau_con = false);

    void validate() const;
    std::size_t size() const { return dims.size(); }
    Vector to_unit(const Vector& x) const;
    Vector from_unit(const Vector& u) const;
};

struct GpKernel {
    Vector length_scales;  // per unit-scaled dimension
    double signal_var = 1.0;
    double noise_var = 1e-6;
};

// Hyperparameter search box for kernel fitting.
inline constexpr double kMinLengthScale = 0.01;
inline constexpr double kMaxLengthScale = 10.0;
inline constexpr double kMinSignalVar = 1e-4;
inline constexpr double kMaxSignalVar = 10.0;
inline constexpr double kMinNoiseVar = 1e-8;
inline constexpr double kMaxNoiseVar = 1e-1;

struct Observation {
    Vector x;  // unit box
    double value = 0.0;
};

struct BOState {
    std::vector<Observation> observations;
    GpKernel kernel;
    // The GP models (value - y_offset) / y_scale with a zero prior mean.
    double y_offset = 0.0;
    double y_scale = 1.0;
    std::size_t incumbent = 0;
    std::vector<double> ei_trace;         // best EI per BO iteration
    std::vector<double> incumbent_trace;  // incumbent value after each evaluation

    const Observation& best() const;
};

struct GpPosterior {
    double mean = 0.0;
    double variance = 0.0;
};

/// Exact GP regression with an ARD RBF kernel; factorises once.
class GaussianProcess {
public:
    GaussianProcess(std::vector<Vector> xs, Vector ys, GpKernel kernel);

    GpPosterior predict(const Vector& query) const;
    double log_marginal_likelihood() const;

private:
    double k(const Vector& a, const Vector& b) const;

    std::vector<Vector> xs_;
    GpKernel kernel_;
    Matrix lower_;
    Vector alpha_;
    double lml_ = 0.0;
};

/// Posterior of the state's GP at `query` in the original value units.
GpPosterior gp_posterior(const BOState& state, const Vector& query);

/// Minimisation convention.
double expected_improvement(double mean, double variance, double best_so_far);

/// Multi-start bounded Nelder-Mead on the log marginal likelihood.
GpKernel fit_kernel(const std::vector<Vector>& xs, const Vector& ys, Rng& rng, int restarts = 3);

/// Halton points (bases 2, 3, 5, ...) with a random Cranley-Patterson shift.
std::vector<Vector> scrambled_halton(std::size_t n, std::size_t dim, Rng& rng, std::size_t skip = 1);

struct BoOptions {
    int n_init = 15;
    int n_iter = 50;
    int n_candidates = 2048;
    int n_local = 256;
    double local_sd = 0.05;
    double prior_sd = 0.5;  // unit-box sd of the acquisition prior weighting
    int kernel_restarts = 3;
};

using Objective = std::function<double(const Vector&)>;  // takes box coordinates
using BoObserver = std::function<void(const BOState&, std::size_t iteration)>;

BOState bo_optimize(const Objective& objective, const SearchSpace& space, const BoOptions& options,
                    Rng& rng, const BoObserver& observer = {});

}  // namespace mcmil

#endif
