#ifndef MCMIL_LOSSES_HPP
#define MCMIL_LOSSES_HPP

#include <span>
#include <string>

#include "mcmil/numerics.hpp"

namespace mcmil {

struct LossWeights {
    double lambda_ce = 0.7;
    double lambda_con = 0.2;
    double lambda_pf = 0.1;
    double tau_con = 0.5;  // contrastive temperature
    double alpha = 0.5;    // sensitivity-direction perturbation scale
    double beta = 0.1;     // Gaussian perturbation scale
    /// Drop j == i from the contrastive sums (the usual SupCon variant).
    bool supcon_exclude_self = false;

    void validate() const;
};

enum class LossMode { ce, ce_con, ce_con_pf };

const char* to_string(LossMode mode) noexcept;
LossMode loss_mode_from_string(const std::string& name);

/// Zeroes the lambdas of terms the mode leaves out.
LossWeights effective_weights(const LossWeights& w, LossMode mode);

struct LossBreakdown {
    double ce = 0.0;
    double con = 0.0;
    double pf = 0.0;
    double total = 0.0;
    double mean_omega = 1.0;
};

// ---- cross-entropy (batch sum) ------------------------------------------

/// -sum_i sum_j y_ij log softmax(l_i)_j; rows of `onehot` must be one-hot.
double cross_entropy(const Matrix& logits, const Matrix& onehot);
Vector cross_entropy_terms(const Matrix& logits, std::span<const int> labels);
/// d/dlogits of sum_i coef_i * ce_i.
Matrix cross_entropy_grad(const Matrix& logits, std::span<const int> labels, const Vector& coef);

// ---- supervised contrastive (cosine similarity, 1/N mean) ---------------

double supcon_loss(const Matrix& features, std::span<const int> labels, double tau_con,
                   bool exclude_self = false);
/// Per-anchor contributions, already including the 1/N factor.
Vector supcon_terms(const Matrix& features, std::span<const int> labels, double tau_con,
                    bool exclude_self = false);
Matrix supcon_grad(const Matrix& features, std::span<const int> labels, double tau_con,
                   bool exclude_self, const Vector& coef);

// ---- perturbation fidelity ----------------------------------------------

/// (1 + cos(v, v')) / 2.
double tissue_compat(const Vector& v, const Vector& v_pert);
/// |<v/|v|, v'/|v'|>| * tissue_compat(v, v').
double fidelity(const Vector& v, const Vector& v_pert);

/// g g^T.
Matrix structure_tensor(const Vector& g);

/// Principal eigenvector of a structure tensor scaled by sqrt(trace); this
/// recovers g up to sign.
Vector principal_direction(const Matrix& s);

/// Empirical covariance of the rows of `features` plus `jitter` on the
/// diagonal. Batches with fewer than dim + 1 rows keep only the diagonal.
Matrix batch_covariance(const Matrix& features, double jitter = 1e-8);

struct PerturbationContext {
    Vector grad;  // sensitivity direction g for this sample
    Matrix sigma;
    Rng* rng = nullptr;
};

/// v + alpha * g + beta * n with n ~ N(0, sigma).
Vector perturb(const Vector& v, const PerturbationContext& ctx, double alpha, double beta);

/// Ordered off-diagonal pairs: same-class pairs pay 1 - F(v_i, v'_j),
/// cross-class pairs pay F(v_i, v'_j); normalised by N(N-1).
double pf_loss(const Matrix& features, std::span<const int> labels, const Matrix& perturbed);
Vector pf_terms(const Matrix& features, std::span<const int> labels, const Matrix& perturbed);

struct PfGradient {
    Matrix features;   // d/d v_i
    Matrix perturbed;  // d/d v'_j
};
PfGradient pf_grad(const Matrix& features, std::span<const int> labels, const Matrix& perturbed,
                   const Vector& coef);

// ---- fusion -------------------------------------------------------------

/// sum_i omega_i * (lambda_ce ce_i + lambda_con con_i + lambda_pf pf_i).
double total_loss(const Vector& ce_terms, const Vector& con_terms, const Vector& pf_terms,
                  const LossWeights& weights, const Vector& omega);

}  // namespace mcmil

#endif
