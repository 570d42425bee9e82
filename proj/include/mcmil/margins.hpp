#ifndef MCMIL_MARGINS_HPP
#define MCMIL_MARGINS_HPP

#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mcmil/model.hpp"
#include "mcmil/numerics.hpp"

namespace mcmil {

struct LogitMargin {
    int predicted = 0;
    double d_out = 0.0;
};

/// Top logit minus runner-up; argmax ties go to the lowest index.
LogitMargin logit_margin(const Vector& logits);

struct PairwiseDistance {
    int other = 0;
    double distance = 0.0;
};

struct FeatureMargins {
    int predicted = 0;
    std::vector<PairwiseDistance> pairwise;  // every j != predicted, ascending j
    double d_feat = 0.0;
};

/// Signed distance from z to each hyperplane {w_y.z + b_y = w_j.z + b_j},
/// scaled by the dual norm of w_y - w_j. `p_norm` is the threat-model norm:
/// 2 (dual 2) or infinity (dual 1).
FeatureMargins feature_margins(const Vector& z, const Matrix& head_w, const Vector& head_b,
                               double p_norm = 2.0);

/// omega = 1 + gamma * sigmoid((tau_m - d_out) / kappa); d_out is expected
/// already min-max normalised.
double margin_weight(double d_out, double gamma, double tau_m, double kappa);

struct MarginParams {
    double gamma = 0.5;
    double tau_m = 0.5;
    double kappa = 0.1;
};

/// Min-max constants frozen from a reference set (the training bags).
struct MarginNormalizer {
    double lo = 0.0;
    double hi = 1.0;

    static MarginNormalizer fit(std::span<const double> d_out);
    /// Maps into [0, 1]; values outside the frozen range are clamped.
    double apply(double d_out) const;
};

/// Minimal view of a bag classifier for the input-margin probe: logits of a
/// bag, and the input gradient of coeffs . logits.
struct BagScorer {
    std::function<Vector(const Matrix&)> logits;
    std::function<Matrix(const Matrix&, const Vector&)> input_gradient;
};

BagScorer make_scorer(const ModelParams& p);

struct InputMarginOptions {
    int direction_budget = 16;
    double tol = 1e-3;
    double max_radius = 1e3;
    bool use_gradient_direction = true;
};

inline constexpr double kNoFlip = std::numeric_limits<double>::infinity();

/// Upper bound on the l2 input-space robust radius over the concatenated bag:
/// the smallest flip radius found by doubling + bisection along random unit
/// directions and the ascent direction of (runner-up - top). Returns kNoFlip
/// when nothing flips within max_radius.
double estimate_input_margin(const BagScorer& scorer, const Matrix& patches,
                             const InputMarginOptions& options, Rng& rng);

/// Tie-corrected Kendall tau-b, O(n log n).
double kendall_tau(std::span<const double> xs, std::span<const double> ys);

/// P(random robust sample has larger d_out than random non-robust), ties 1/2.
double margin_separation_auroc(std::span<const double> d_out, const std::vector<bool>& robust);

/// trace(S_within) / trace(S_between); rows of `latents` are samples.
double neural_collapse_index(const Matrix& latents, std::span<const int> labels);

struct MarginReport {
    int predicted = 0;
    int label = 0;
    double d_out = 0.0;
    std::vector<PairwiseDistance> pairwise;
    double d_feat = 0.0;
    std::optional<double> d_in_estimate;
    double omega = 1.0;
};

}  // namespace mcmil

#endif
