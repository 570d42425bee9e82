#include "mcmil/bayesopt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "mcmil/stats.hpp"

namespace mcmil {

SearchSpace SearchSpace::margin_defaults(bool include_tau_con) {
    SearchSpace s;
    s.dims = {
        {"gamma", 0.0, 1.5, false},
        {"tau_m", 0.2, 0.8, false},
        {"kappa", 0.05, 0.3, false},
        {"alpha", 0.1, 0.9, true},
        {"beta", 0.01, 0.3, true},
    };
    if (include_tau_con) {
        s.dims.push_back({"tau_con", 0.1, 1.0, true});
    }
    return s;
}

void SearchSpace::validate() const {
    require(!dims.empty(), ErrorCode::parameter, "SearchSpace: no dimensions");
    for (const auto& d : dims) {
        require(d.lower < d.upper, ErrorCode::parameter, "SearchSpace: lower >= upper for " + d.name);
    }
}

Vector SearchSpace::to_unit(const Vector& x) const {
    require(static_cast<std::size_t>(x.size()) == dims.size(), ErrorCode::dimension,
            "SearchSpace: point dimension mismatch");
    Vector u(x.size());
    for (std::size_t d = 0; d < dims.size(); ++d) {
        const auto i = static_cast<Eigen::Index>(d);
        u[i] = (x[i] - dims[d].lower) / (dims[d].upper - dims[d].lower);
    }
    return u;
}

Vector SearchSpace::from_unit(const Vector& u) const {
    require(static_cast<std::size_t>(u.size()) == dims.size(), ErrorCode::dimension,
            "SearchSpace: point dimension mismatch");
    Vector x(u.size());
    for (std::size_t d = 0; d < dims.size(); ++d) {
        const auto i = static_cast<Eigen::Index>(d);
        const double t = std::clamp(u[i], 0.0, 1.0);
        x[i] = std::clamp(dims[d].lower + t * (dims[d].upper - dims[d].lower), dims[d].lower,
                          dims[d].upper);
    }
    return x;
}

const Observation& BOState::best() const {
    require(!observations.empty(), ErrorCode::empty_input, "BOState: no observations");
    return observations[incumbent];
}

GaussianProcess::GaussianProcess(std::vector<Vector> xs, Vector ys, GpKernel kernel)
    : xs_(std::move(xs)), kernel_(std::move(kernel)) {
    require(!xs_.empty(), ErrorCode::empty_input, "GaussianProcess: no observations");
    require(static_cast<std::size_t>(ys.size()) == xs_.size(), ErrorCode::dimension,
            "GaussianProcess: value count differs from point count");
    require(kernel_.length_scales.size() == xs_.front().size(), ErrorCode::dimension,
            "GaussianProcess: length-scale count differs from dimension");
    require((kernel_.length_scales.array() > 0.0).all() && kernel_.signal_var > 0.0 &&
                kernel_.noise_var >= 0.0,
            ErrorCode::parameter, "GaussianProcess: kernel hyperparameters must be positive");
    const auto n = static_cast<Eigen::Index>(xs_.size());
    Matrix gram(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            const double v = k(xs_[static_cast<std::size_t>(i)], xs_[static_cast<std::size_t>(j)]);
            gram(i, j) = v;
            gram(j, i) = v;
        }
        gram(i, i) += kernel_.noise_var;
    }
    lower_ = cholesky_psd(gram, 0.0).lower;
    // Semi-definite factors may carry zero pivots; pin them for the solves.
    for (Eigen::Index i = 0; i < n; ++i) {
        if (lower_(i, i) == 0.0) {
            lower_(i, i) = 1e-12;
        }
    }
    const Vector half = lower_.triangularView<Eigen::Lower>().solve(ys);
    alpha_ = lower_.transpose().triangularView<Eigen::Upper>().solve(half);
    lml_ = -0.5 * ys.dot(alpha_) - lower_.diagonal().array().log().sum() -
           0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

double GaussianProcess::k(const Vector& a, const Vector& b) const {
    const double r2 = ((a - b).array() / kernel_.length_scales.array()).square().sum();
    return kernel_.signal_var * std::exp(-0.5 * r2);
}

GpPosterior GaussianProcess::predict(const Vector& query) const {
    require(query.size() == xs_.front().size(), ErrorCode::dimension, "GP predict: query dimension mismatch");
    const auto n = static_cast<Eigen::Index>(xs_.size());
    Vector kstar(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        kstar[i] = k(query, xs_[static_cast<std::size_t>(i)]);
    }
    GpPosterior out;
    out.mean = kstar.dot(alpha_);
    const Vector v = lower_.triangularView<Eigen::Lower>().solve(kstar);
    out.variance = std::max(0.0, kernel_.signal_var - v.squaredNorm());
    return out;
}

double GaussianProcess::log_marginal_likelihood() const { return lml_; }

GpPosterior gp_posterior(const BOState& state, const Vector& query) {
    require(!state.observations.empty(), ErrorCode::empty_input, "gp_posterior: no observations");
    std::vector<Vector> xs;
    Vector ys(static_cast<Eigen::Index>(state.observations.size()));
    for (std::size_t i = 0; i < state.observations.size(); ++i) {
        xs.push_back(state.observations[i].x);
        ys[static_cast<Eigen::Index>(i)] = (state.observations[i].value - state.y_offset) / state.y_scale;
    }
    const GaussianProcess gp(std::move(xs), ys, state.kernel);
    GpPosterior p = gp.predict(query);
    p.mean = state.y_offset + state.y_scale * p.mean;
    p.variance *= state.y_scale * state.y_scale;
    return p;
}

double expected_improvement(double mean, double variance, double best_so_far) {
    const double s = std::sqrt(std::max(0.0, variance));
    const double gain = best_so_far - mean;
    if (s <= 0.0) {
        return std::max(0.0, gain);
    }
    const double z = gain / s;
    const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return std::max(0.0, gain * cdf + s * pdf);
}

namespace {

// theta = (log l_1..l_d, log signal_var, log noise_var)
struct KernelBox {
    Vector lo;
    Vector hi;

    explicit KernelBox(Eigen::Index dim) : lo(dim + 2), hi(dim + 2) {
        lo.head(dim).setConstant(std::log(kMinLengthScale));
        hi.head(dim).setConstant(std::log(kMaxLengthScale));
        lo[dim] = std::log(kMinSignalVar);
        hi[dim] = std::log(kMaxSignalVar);
        lo[dim + 1] = std::log(kMinNoiseVar);
        hi[dim + 1] = std::log(kMaxNoiseVar);
    }

    Vector clamp(const Vector& t) const { return t.cwiseMax(lo).cwiseMin(hi); }
};

GpKernel kernel_from_theta(const Vector& theta) {
    const Eigen::Index dim = theta.size() - 2;
    GpKernel k;
    // exp(log(bound)) can round just outside the box.
    k.length_scales =
        theta.head(dim).array().exp().cwiseMax(kMinLengthScale).cwiseMin(kMaxLengthScale).matrix();
    k.signal_var = std::clamp(std::exp(theta[dim]), kMinSignalVar, kMaxSignalVar);
    k.noise_var = std::clamp(std::exp(theta[dim + 1]), kMinNoiseVar, kMaxNoiseVar);
    return k;
}

Vector theta_from_kernel(const GpKernel& k) {
    const Eigen::Index dim = k.length_scales.size();
    Vector t(dim + 2);
    t.head(dim) = k.length_scales.array().log().matrix();
    t[dim] = std::log(k.signal_var);
    t[dim + 1] = std::log(k.noise_var);
    return t;
}

double neg_lml(const std::vector<Vector>& xs, const Vector& ys, const Vector& theta) {
    try {
        const GaussianProcess gp(xs, ys, kernel_from_theta(theta));
        const double v = -gp.log_marginal_likelihood();
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    } catch (const Error&) {
        return std::numeric_limits<double>::infinity();
    }
}

// Nelder-Mead with every vertex projected into the box.
Vector nelder_mead(const std::function<double(const Vector&)>& f, const Vector& start,
                   const KernelBox& box, int max_evals, double* best_value) {
    const Eigen::Index n = start.size();
    std::vector<Vector> simplex;
    std::vector<double> values;
    simplex.push_back(box.clamp(start));
    for (Eigen::Index i = 0; i < n; ++i) {
        Vector v = simplex.front();
        const double step = 0.1 * (box.hi[i] - box.lo[i]);
        v[i] = v[i] + step <= box.hi[i] ? v[i] + step : v[i] - step;
        simplex.push_back(box.clamp(v));
    }
    for (const auto& v : simplex) {
        values.push_back(f(v));
    }
    int evals = static_cast<int>(simplex.size());
    std::vector<std::size_t> order(simplex.size());
    while (evals < max_evals) {
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
        const std::size_t best = order.front();
        const std::size_t worst = order.back();
        const std::size_t second = order[order.size() - 2];
        if (std::abs(values[worst] - values[best]) < 1e-9 * (1.0 + std::abs(values[best]))) {
            break;
        }
        Vector centroid = Vector::Zero(n);
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            centroid += simplex[order[i]];
        }
        centroid /= static_cast<double>(n);
        const Vector reflected = box.clamp(centroid + (centroid - simplex[worst]));
        const double fr = f(reflected);
        ++evals;
        if (fr < values[best]) {
            const Vector expanded = box.clamp(centroid + 2.0 * (centroid - simplex[worst]));
            const double fe = f(expanded);
            ++evals;
            if (fe < fr) {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if (fr < values[second]) {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            const Vector contracted = box.clamp(centroid + 0.5 * (simplex[worst] - centroid));
            const double fc = f(contracted);
            ++evals;
            if (fc < values[worst]) {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                for (std::size_t i = 0; i < simplex.size(); ++i) {
                    if (i == best) continue;
                    simplex[i] = box.clamp(simplex[best] + 0.5 * (simplex[i] - simplex[best]));
                    values[i] = f(simplex[i]);
                    ++evals;
                }
            }
        }
    }
    const auto it = std::min_element(values.begin(), values.end());
    *best_value = *it;
    return simplex[static_cast<std::size_t>(it - values.begin())];
}

}  // namespace

GpKernel fit_kernel(const std::vector<Vector>& xs, const Vector& ys, Rng& rng, int restarts) {
    require(!xs.empty(), ErrorCode::empty_input, "fit_kernel: no observations");
    const Eigen::Index dim = xs.front().size();
    const KernelBox box(dim);
    auto objective = [&](const Vector& theta) { return neg_lml(xs, ys, theta); };

    std::vector<Vector> starts;
    GpKernel def;
    def.length_scales = Vector::Constant(dim, 0.3);
    def.signal_var = 1.0;
    def.noise_var = 1e-4;
    starts.push_back(theta_from_kernel(def));
    for (int r = 0; r < restarts; ++r) {
        Vector t(dim + 2);
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            t[i] = box.lo[i] + rng.uniform() * (box.hi[i] - box.lo[i]);
        }
        starts.push_back(t);
    }
    const int max_evals = 60 * static_cast<int>(dim + 2);
    Vector best_theta = starts.front();
    double best_value = std::numeric_limits<double>::infinity();
    for (const auto& s : starts) {
        double value = 0.0;
        const Vector theta = nelder_mead(objective, s, box, max_evals, &value);
        if (value < best_value) {
            best_value = value;
            best_theta = theta;
        }
    }
    return kernel_from_theta(best_theta);
}

std::vector<Vector> scrambled_halton(std::size_t n, std::size_t dim, Rng& rng, std::size_t skip) {
    static constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};
    require(dim <= std::size(kPrimes), ErrorCode::dimension, "scrambled_halton: too many dimensions");
    Vector shift(static_cast<Eigen::Index>(dim));
    for (std::size_t d = 0; d < dim; ++d) {
        shift[static_cast<Eigen::Index>(d)] = rng.uniform();
    }
    std::vector<Vector> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vector p(static_cast<Eigen::Index>(dim));
        for (std::size_t d = 0; d < dim; ++d) {
            const int base = kPrimes[d];
            double f = 1.0;
            double r = 0.0;
            std::size_t idx = i + skip;
            while (idx > 0) {
                f /= base;
                r += f * static_cast<double>(idx % static_cast<std::size_t>(base));
                idx /= static_cast<std::size_t>(base);
            }
            const double v = r + shift[static_cast<Eigen::Index>(d)];
            p[static_cast<Eigen::Index>(d)] = v - std::floor(v);
        }
        out.push_back(std::move(p));
    }
    return out;
}

namespace {

double prior_weight(const SearchSpace& space, const Vector& u, double prior_sd) {
    double w = 1.0;
    for (std::size_t d = 0; d < space.dims.size(); ++d) {
        if (space.dims[d].gaussian_prior) {
            const double z = (u[static_cast<Eigen::Index>(d)] - 0.5) / prior_sd;
            w *= std::exp(-0.5 * z * z);
        }
    }
    return w;
}

void record(BOState& state, Vector x, double value) {
    if (!std::isfinite(value)) {
        double worst = -std::numeric_limits<double>::infinity();
        for (const auto& o : state.observations) {
            worst = std::max(worst, o.value);
        }
        value = std::isfinite(worst) ? worst + 9.0 * std::max(1.0, std::abs(worst)) : 1e6;
    }
    state.observations.push_back({std::move(x), value});
    const std::size_t idx = state.observations.size() - 1;
    if (idx == 0 || value < state.observations[state.incumbent].value) {
        state.incumbent = idx;
    }
    state.incumbent_trace.push_back(state.observations[state.incumbent].value);
}

}  // namespace

BOState bo_optimize(const Objective& objective, const SearchSpace& space, const BoOptions& options,
                    Rng& rng, const BoObserver& observer) {
    space.validate();
    require(options.n_init >= 1 && options.n_iter >= 0, ErrorCode::parameter,
            "bo_optimize: n_init >= 1 and n_iter >= 0 required");
    const std::size_t dim = space.size();
    BOState state;
    state.kernel.length_scales = Vector::Constant(static_cast<Eigen::Index>(dim), 0.3);

    for (auto& u : scrambled_halton(static_cast<std::size_t>(options.n_init), dim, rng)) {
        const double value = objective(space.from_unit(u));
        record(state, std::move(u), value);
        if (observer) observer(state, state.observations.size() - 1);
    }

    for (int it = 0; it < options.n_iter; ++it) {
        std::vector<Vector> xs;
        std::vector<double> raw;
        for (const auto& o : state.observations) {
            xs.push_back(o.x);
            raw.push_back(o.value);
        }
        state.y_offset = mean(raw);
        state.y_scale = raw.size() >= 2 ? sample_sd(raw) : 1.0;
        if (!(state.y_scale > 0.0)) state.y_scale = 1.0;
        Vector ys(static_cast<Eigen::Index>(raw.size()));
        for (std::size_t i = 0; i < raw.size(); ++i) {
            ys[static_cast<Eigen::Index>(i)] = (raw[i] - state.y_offset) / state.y_scale;
        }
        state.kernel = fit_kernel(xs, ys, rng, options.kernel_restarts);
        const GaussianProcess gp(xs, ys, state.kernel);
        const double best = ys.minCoeff();

        std::vector<Vector> candidates =
            scrambled_halton(static_cast<std::size_t>(options.n_candidates), dim, rng);
        const Vector& inc = state.observations[state.incumbent].x;
        for (int l = 0; l < options.n_local; ++l) {
            Vector c = inc;
            for (Eigen::Index d = 0; d < c.size(); ++d) {
                c[d] = std::clamp(c[d] + options.local_sd * rng.normal(), 0.0, 1.0);
            }
            candidates.push_back(std::move(c));
        }

        double best_acq = -1.0;
        double best_ei = 0.0;
        std::size_t pick = 0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            const GpPosterior post = gp.predict(candidates[c]);
            const double ei = expected_improvement(post.mean, post.variance, best);
            const double acq = ei * prior_weight(space, candidates[c], options.prior_sd);
            if (acq > best_acq) {
                best_acq = acq;
                best_ei = ei;
                pick = c;
            }
        }
        state.ei_trace.push_back(best_ei * state.y_scale);
        Vector chosen = candidates[pick];
        const double value = objective(space.from_unit(chosen));
        record(state, std::move(chosen), value);
        if (observer) observer(state, state.observations.size() - 1);
    }
    return state;
}

}  // namespace mcmil
