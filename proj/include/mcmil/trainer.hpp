#ifndef MCMIL_TRAINER_HPP
#define MCMIL_TRAINER_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "mcmil/losses.hpp"
#include "mcmil/margins.hpp"
#include "mcmil/model.hpp"
#include "mcmil/stats.hpp"
#include "mcmil/synthdata.hpp"

namespace mcmil {

struct TrainConfig {
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int patience = 100;
    int max_epochs = 500;
    int batch_size = 25;  // bags per step
    LossWeights loss_weights;
    MarginParams margin;
    std::uint64_t seed = 1;
    LossMode loss_mode = LossMode::ce_con_pf;
    int threads = 1;

    void validate() const;
};

struct StepRecord {
    int step = 0;
    int epoch = 0;
    LossBreakdown loss;
};

struct EpochRecord {
    int epoch = 0;
    LossBreakdown train;  // sums over the epoch's steps; mean_omega over bags
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    double mean_d_out = 0.0;  // validation, unnormalised
    std::optional<double> kendall_feat_out;
    std::optional<double> neural_collapse;
    std::optional<double> omega_misclassified;  // training bags, start of epoch
    std::optional<double> omega_correct;
};

struct RunHistory {
    std::vector<EpochRecord> epochs;
    std::vector<StepRecord> steps;
    int stopping_epoch = 0;
    int best_epoch = 0;
    double best_val_accuracy = 0.0;
    double last10_mean = 0.0;
    double last10_std = 0.0;
};

struct TrainResult {
    ModelParams model;
    RunHistory history;
    MarginNormalizer normalizer;  // frozen constants of the last epoch
};

/// Non-finite loss; carries the last finite parameters and the partial history.
class DivergedError : public Error {
public:
    DivergedError(const std::string& what, ModelParams last_finite, RunHistory history)
        : Error(ErrorCode::diverged, what),
          last_finite_(std::move(last_finite)),
          history_(std::move(history)) {}

    const ModelParams& last_finite() const noexcept { return last_finite_; }
    const RunHistory& history() const noexcept { return history_; }

private:
    ModelParams last_finite_;
    RunHistory history_;
};

std::vector<SlideForward> forward_batch(const ModelParams& p, const std::vector<const PatchBag*>& bags,
                                        int threads = 1);

/// Noise for the Gaussian perturbation branch: a fixed per-sample matrix
/// (rows already ~ N(0, Sigma)), or draws from `rng` using the batch
/// covariance. With neither, the branch is zero.
struct PerturbationNoise {
    const Matrix* fixed = nullptr;
    Rng* rng = nullptr;
};

struct BatchObjective {
    LossBreakdown loss;
    ModelParams grad;
    Vector ce_terms;
    Vector con_terms;
    Vector pf_terms;
};

/// Fused weighted loss of one batch and its exact gradient. omega is treated
/// as a constant; the sensitivity direction of each sample is the head row
/// of its predicted class and is differentiated through.
BatchObjective batch_objective(const ModelParams& p, const std::vector<const PatchBag*>& bags,
                               const std::vector<SlideForward>& fwd, std::span<const int> labels,
                               const Vector& omega, const LossWeights& weights,
                               PerturbationNoise noise = {}, int threads = 1);

TrainResult train(const ModelDims& dims, const TrainConfig& config, const std::vector<PatchBag>& train_bags,
                  const std::vector<PatchBag>& val_bags);

struct BagScore {
    int label = 0;
    int predicted = 0;
    Vector probabilities;
    double d_out = 0.0;
    double d_feat = 0.0;
};

struct EvalReport {
    double accuracy = 0.0;
    Confusion confusion;
    std::vector<BagScore> bags;
    Matrix embeddings;  // one row per bag
};

EvalReport evaluate(const ModelParams& p, const std::vector<PatchBag>& bags, int threads = 1);

struct MarginOptions {
    double p_norm = 2.0;
    bool estimate_input = true;
    InputMarginOptions input;
    std::uint64_t seed = 1;
};

std::vector<MarginReport> margin_reports(const ModelParams& p, const std::vector<PatchBag>& bags,
                                         const MarginNormalizer& normalizer,
                                         const MarginParams& margin, const MarginOptions& options,
                                         int threads = 1);

}  // namespace mcmil

#endif
