#ifndef MCMIL_STATS_HPP
#define MCMIL_STATS_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mcmil/numerics.hpp"

namespace mcmil {

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Percentile bootstrap interval for the mean. Resample b draws its indices
/// from a stream derived from (one draw of `rng`, b), so the result does not
/// depend on `threads`.
Interval bootstrap_ci(std::span<const double> values, int n_boot, double level, Rng& rng,
                      int threads = 1);

/// Linear-interpolation (type 7) quantile of sorted data.
double quantile_sorted(std::span<const double> sorted, double q);

struct PairedPrediction {
    int label = 0;
    int pred_a = 0;
    int pred_b = 0;
};

struct McNemarResult {
    long long b = 0;  // a correct, b wrong
    long long c = 0;  // a wrong, b correct
    double chi2 = 0.0;
    double p = 1.0;
};

McNemarResult mcnemar(std::span<const PairedPrediction> paired, bool continuity_correction = false);

using Table2x2 = std::array<std::array<long long, 2>, 2>;

/// Two-sided Fisher exact test: sums the hypergeometric probabilities of
/// every same-margin table no more probable than the observed one. Totals up
/// to kFisherExactLimit use exact integer arithmetic; larger totals use
/// log-gamma probabilities with a 1e-7 relative tie slack.
double fisher_exact(const Table2x2& table);
inline constexpr long long kFisherExactLimit = 30;

double cohens_d(std::span<const double> group_a, std::span<const double> group_b);

struct LeveneResult {
    double w = 0.0;
    double p = 1.0;
};

/// Brown-Forsythe (median-centred) Levene test.
LeveneResult levene(const std::vector<std::vector<double>>& groups);

/// Rank-sum AUC with ties counted 1/2; labels are 0/1.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct CapCurve {
    std::vector<std::pair<double, double>> points;  // (fraction ranked, fraction captured)
    double accuracy_ratio = 0.0;
};

/// Tied scores are treated as one block with linear capture inside it, which
/// is the expected curve under a random order of the tied samples.
CapCurve cap_curve(std::span<const double> scores, std::span<const int> labels);

struct ClassMetrics {
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> ppv;
    std::optional<double> npv;
};

using Confusion = std::vector<std::vector<long long>>;  // [true][predicted]

std::vector<ClassMetrics> per_class_metrics(const Confusion& confusion);

Confusion confusion_matrix(std::span<const int> labels, std::span<const int> preds, int n_classes);

double coefficient_of_variation(std::span<const double> values);

double mean(std::span<const double> values);
double sample_sd(std::span<const double> values);

// Tail probabilities (series / continued fractions, ~1e-12 relative).
double regularized_gamma_p(double a, double x);
double regularized_gamma_q(double a, double x);
double regularized_beta(double a, double b, double x);
double chi2_sf(double x, double dof);
double f_sf(double f, double d1, double d2);

}  // namespace mcmil

#endif
