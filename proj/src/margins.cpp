#include "mcmil/margins.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcmil/stats.hpp"

namespace mcmil {

LogitMargin logit_margin(const Vector& logits) {
    require(logits.size() >= 2, ErrorCode::dimension, "logit_margin: need at least 2 logits");
    require(logits.allFinite(), ErrorCode::evaluation, "logit_margin: non-finite logit");
    LogitMargin out;
    Eigen::Index top = 0;
    for (Eigen::Index k = 1; k < logits.size(); ++k) {
        if (logits[k] > logits[top]) {
            top = k;
        }
    }
    double runner_up = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < logits.size(); ++k) {
        if (k != top) {
            runner_up = std::max(runner_up, logits[k]);
        }
    }
    out.predicted = static_cast<int>(top);
    out.d_out = logits[top] - runner_up;
    return out;
}

namespace {

double dual_norm(const Vector& v, double p_norm) {
    if (std::isinf(p_norm)) {
        return v.lpNorm<1>();
    }
    if (p_norm == 1.0) {
        return v.lpNorm<Eigen::Infinity>();
    }
    if (p_norm == 2.0) {
        return v.norm();
    }
    const double q = p_norm / (p_norm - 1.0);
    return std::pow(v.array().abs().pow(q).sum(), 1.0 / q);
}

}  // namespace

FeatureMargins feature_margins(const Vector& z, const Matrix& head_w, const Vector& head_b,
                               double p_norm) {
    require(head_w.cols() == z.size() && head_w.rows() == head_b.size(), ErrorCode::dimension,
            "feature_margins: head and z dimensions disagree");
    require(p_norm >= 1.0, ErrorCode::parameter, "feature_margins: p_norm must be >= 1");
    const Vector logits = head_w * z + head_b;
    const LogitMargin lm = logit_margin(logits);
    const int y = lm.predicted;

    FeatureMargins out;
    out.predicted = y;
    out.d_feat = std::numeric_limits<double>::infinity();
    for (int j = 0; j < head_w.rows(); ++j) {
        if (j == y) {
            continue;
        }
        const Vector dw = (head_w.row(y) - head_w.row(j)).transpose();
        const double norm = dual_norm(dw, p_norm);
        const double dlogit = logits[y] - logits[j];
        double dist = 0.0;
        if (norm == 0.0) {
            require(head_b[y] != head_b[j], ErrorCode::degenerate_head,
                    "feature_margins: classes " + std::to_string(y) + " and " + std::to_string(j) +
                        " share weights and bias; hyperplane undefined");
            // Parallel "hyperplane" at infinity: z can never reach it.
            dist = dlogit > 0.0 ? std::numeric_limits<double>::infinity()
                                : -std::numeric_limits<double>::infinity();
        } else {
            dist = dlogit / norm;
        }
        out.pairwise.push_back({j, dist});
        out.d_feat = std::min(out.d_feat, dist);
    }
    return out;
}

double margin_weight(double d_out, double gamma, double tau_m, double kappa) {
    require(kappa > 0.0, ErrorCode::parameter, "margin_weight: kappa must be > 0");
    require(gamma >= 0.0, ErrorCode::parameter, "margin_weight: gamma must be >= 0");
    const double t = (tau_m - d_out) / kappa;
    const double sig = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    return 1.0 + gamma * sig;
}

MarginNormalizer MarginNormalizer::fit(std::span<const double> d_out) {
    require(!d_out.empty(), ErrorCode::empty_input, "MarginNormalizer: no margins");
    const auto [lo, hi] = std::minmax_element(d_out.begin(), d_out.end());
    return {*lo, *hi};
}

double MarginNormalizer::apply(double d_out) const {
    if (!(hi > lo)) {
        return 0.0;
    }
    return std::clamp((d_out - lo) / (hi - lo), 0.0, 1.0);
}

BagScorer make_scorer(const ModelParams& p) {
    BagScorer s;
    s.logits = [&p](const Matrix& patches) { return forward(patches, p).logits; };
    s.input_gradient = [&p](const Matrix& patches, const Vector& coeffs) {
        const SlideForward f = forward(patches, p);
        return backward(patches, f, p, coeffs, Vector::Zero(p.dims.latent), true).inputs;
    };
    return s;
}

namespace {

class FlipProbe {
public:
    FlipProbe(const BagScorer& scorer, const Matrix& patches, int clean)
        : scorer_(scorer), patches_(patches), clean_(clean) {}

    bool flips(const Matrix& direction, double radius) const {
        const Vector logits = scorer_.logits(patches_ + radius * direction);
        return logit_margin(logits).predicted != clean_;
    }

    // Smallest radius found along `direction`, or kNoFlip if none below `cap`.
    double radius(const Matrix& direction, double tol, double cap) const {
        double lo = 0.0;
        double hi = tol;
        while (hi <= cap) {
            if (flips(direction, hi)) {
                while (hi - lo > tol) {
                    const double mid = 0.5 * (lo + hi);
                    if (flips(direction, mid)) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return hi;
            }
            lo = hi;
            hi *= 2.0;
        }
        return kNoFlip;
    }

private:
    const BagScorer& scorer_;
    const Matrix& patches_;
    int clean_;
};

}  // namespace

double estimate_input_margin(const BagScorer& scorer, const Matrix& patches,
                             const InputMarginOptions& options, Rng& rng) {
    require(options.tol > 0.0, ErrorCode::parameter, "estimate_input_margin: tol must be > 0");
    require(options.direction_budget >= 0, ErrorCode::parameter,
            "estimate_input_margin: direction_budget must be >= 0");
    const Vector logits = scorer.logits(patches);
    const LogitMargin clean = logit_margin(logits);
    const FlipProbe probe(scorer, patches, clean.predicted);

    // Random directions are drawn first and unconditionally so that adding the
    // gradient direction only ever enlarges the candidate set.
    std::vector<Matrix> directions;
    directions.reserve(static_cast<std::size_t>(options.direction_budget) + 1);
    for (int k = 0; k < options.direction_budget; ++k) {
        Matrix d(patches.rows(), patches.cols());
        for (Eigen::Index j = 0; j < d.cols(); ++j) {
            for (Eigen::Index i = 0; i < d.rows(); ++i) {
                d(i, j) = rng.normal();
            }
        }
        const double n = d.norm();
        if (n > 0.0) {
            directions.push_back(d / n);
        }
    }
    if (options.use_gradient_direction) {
        Vector coeffs = Vector::Zero(logits.size());
        int runner = clean.predicted == 0 ? 1 : 0;
        for (Eigen::Index k = 0; k < logits.size(); ++k) {
            if (k != clean.predicted && logits[k] > logits[runner]) {
                runner = static_cast<int>(k);
            }
        }
        coeffs[runner] = 1.0;
        coeffs[clean.predicted] = -1.0;
        const Matrix g = scorer.input_gradient(patches, coeffs);
        const double n = g.norm();
        if (n > 0.0 && std::isfinite(n)) {
            directions.insert(directions.begin(), g / n);
        }
    }

    double best = kNoFlip;
    for (const auto& d : directions) {
        const double cap = std::min(options.max_radius, best);
        best = std::min(best, probe.radius(d, options.tol, cap));
    }
    return best;
}

double kendall_tau(std::span<const double> xs, std::span<const double> ys) {
    require(xs.size() == ys.size(), ErrorCode::dimension, "kendall_tau: length mismatch");
    require(xs.size() >= 2, ErrorCode::dimension, "kendall_tau: need n >= 2");
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return xs[a] < xs[b] || (xs[a] == xs[b] && ys[a] < ys[b]);
    });

    using Count = long long;
    auto pairs = [](Count t) { return t * (t - 1) / 2; };
    Count ties_x = 0;
    Count ties_xy = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && xs[order[j]] == xs[order[i]]) {
            ++j;
        }
        ties_x += pairs(static_cast<Count>(j - i));
        for (std::size_t k = i; k < j;) {
            std::size_t m = k + 1;
            while (m < j && ys[order[m]] == ys[order[k]]) {
                ++m;
            }
            ties_xy += pairs(static_cast<Count>(m - k));
            k = m;
        }
        i = j;
    }

    // Merge sort on y counts the swaps needed, i.e. the discordant pairs.
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = ys[order[i]];
    }
    std::vector<double> buf(n);
    Count swaps = 0;
    for (std::size_t width = 1; width < n; width *= 2) {
        for (std::size_t lo = 0; lo < n; lo += 2 * width) {
            const std::size_t mid = std::min(lo + width, n);
            const std::size_t hi = std::min(lo + 2 * width, n);
            std::size_t a = lo;
            std::size_t b = mid;
            std::size_t out = lo;
            while (a < mid && b < hi) {
                if (y[b] < y[a]) {
                    swaps += static_cast<Count>(mid - a);
                    buf[out++] = y[b++];
                } else {
                    buf[out++] = y[a++];
                }
            }
            while (a < mid) {
                buf[out++] = y[a++];
            }
            while (b < hi) {
                buf[out++] = y[b++];
            }
        }
        std::swap(y, buf);
    }

    Count ties_y = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && y[j] == y[i]) {
            ++j;
        }
        ties_y += pairs(static_cast<Count>(j - i));
        i = j;
    }

    const Count n0 = pairs(static_cast<Count>(n));
    require(n0 - ties_x > 0 && n0 - ties_y > 0, ErrorCode::undefined,
            "kendall_tau: a sequence is entirely tied");
    const Count numerator = n0 - ties_x - ties_y + ties_xy - 2 * swaps;
    return static_cast<double>(numerator) /
           std::sqrt(static_cast<double>(n0 - ties_x) * static_cast<double>(n0 - ties_y));
}

double margin_separation_auroc(std::span<const double> d_out, const std::vector<bool>& robust) {
    require(d_out.size() == robust.size(), ErrorCode::dimension,
            "margin_separation_auroc: length mismatch");
    std::vector<int> labels(robust.size());
    for (std::size_t i = 0; i < robust.size(); ++i) {
        labels[i] = robust[i] ? 1 : 0;
    }
    try {
        return roc_auc(d_out, labels);
    } catch (const Error&) {
        fail(ErrorCode::undefined, "margin_separation_auroc: flags contain a single class");
    }
}

double neural_collapse_index(const Matrix& latents, std::span<const int> labels) {
    require(static_cast<std::size_t>(latents.rows()) == labels.size(), ErrorCode::dimension,
            "neural_collapse_index: label count differs from sample count");
    require(!labels.empty(), ErrorCode::empty_input, "neural_collapse_index: no samples");
    const int n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    require(*std::min_element(labels.begin(), labels.end()) >= 0, ErrorCode::label,
            "neural_collapse_index: negative label");
    Matrix means = Matrix::Zero(n_classes, latents.cols());
    std::vector<double> counts(static_cast<std::size_t>(n_classes), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        means.row(labels[i]) += latents.row(static_cast<Eigen::Index>(i));
        counts[static_cast<std::size_t>(labels[i])] += 1.0;
    }
    int present = 0;
    for (int c = 0; c < n_classes; ++c) {
        if (counts[static_cast<std::size_t>(c)] > 0.0) {
            means.row(c) /= counts[static_cast<std::size_t>(c)];
            ++present;
        }
    }
    require(present >= 2, ErrorCode::dimension, "neural_collapse_index: need >= 2 classes");
    const Eigen::RowVectorXd global = latents.colwise().mean();
    double within = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        within += (latents.row(static_cast<Eigen::Index>(i)) - means.row(labels[i])).squaredNorm();
    }
    double between = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        between += counts[static_cast<std::size_t>(c)] * (means.row(c) - global).squaredNorm();
    }
    require(between > 0.0, ErrorCode::degenerate_scatter,
            "neural_collapse_index: all class means coincide");
    return within / between;
}

}  // namespace mcmil
