#ifndef MCMIL_EXPERIMENT_HPP
#define MCMIL_EXPERIMENT_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcmil/bayesopt.hpp"
#include "mcmil/losses.hpp"
#include "mcmil/model.hpp"
#include "mcmil/synthdata.hpp"
#include "mcmil/trainer.hpp"

namespace mcmil {

inline constexpr const char* kArtifactVersion = "1.0.0";

struct TuneSettings {
    int n_init = 15;
    int n_iter = 50;
    bool tune_tau_con = false;
};

struct MarginSettings {
    double p_norm = 2.0;
    int direction_budget = 16;
    double tol = 1e-3;
    bool estimate_input = true;
};

struct StatsSettings {
    int n_boot = 1000;
    double level = 0.95;
    bool mcnemar_continuity = false;
};

/// Fully resolved experiment description. The dataset is either generated
/// from `dataset` (its seed replaced by the run seed) or read from
/// `dataset_path`; the last `n_val` bags form the validation split.
struct ExperimentConfig {
    BagSpec dataset;
    std::optional<std::string> dataset_path;
    int n_val = 100;
    ModelDims model;
    TrainConfig train;
    std::vector<LossMode> loss_modes{LossMode::ce, LossMode::ce_con, LossMode::ce_con_pf};
    std::vector<std::uint64_t> seeds{1};
    TuneSettings tune;
    MarginSettings margins;
    StatsSettings stats;

    void validate() const;
};

/// Missing keys keep their defaults; unknown keys are rejected. A manifest
/// written by any subcommand is accepted as well (its "config" object).
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& config);

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<LossMode> loss_mode;
};

/// Flags win over file values; a seed override replaces the seed list.
void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

struct DataSplit {
    std::vector<PatchBag> train;
    std::vector<PatchBag> val;
};

DataSplit load_split(const ExperimentConfig& config, std::uint64_t seed, int threads = 1);

/// Checkpoint JSON with the frozen margin normaliser alongside the weights.
void save_checkpoint(const ModelParams& p, const MarginNormalizer& normalizer, const std::string& path);
std::pair<ModelParams, MarginNormalizer> load_checkpoint(const std::string& path);

/// Run log lines after the timestamp header; identical for identical runs.
std::vector<std::string> run_log_records(const RunHistory& history);

// Subcommands. Each writes manifest.json plus its artifacts into `out_dir`
// (created if missing) and throws Error on failure.
void run_generate(const ExperimentConfig& config, const std::string& out_dir, int threads);
void run_train(const ExperimentConfig& config, const std::string& out_dir, int threads);
void run_tune(const ExperimentConfig& config, const std::string& out_dir, int threads);
void run_margins(const ExperimentConfig& config, const std::string& model_path, const std::string& out_dir,
                 int threads);
void run_evaluate(const ExperimentConfig& config, const std::string& model_path,
                  const std::string& out_dir, int threads);
void run_stats(const ExperimentConfig& config, const std::string& pred_a,
               const std::optional<std::string>& pred_b, const std::string& out_dir, int threads);
void run_ablate(const ExperimentConfig& config, const std::string& out_dir, int threads);

struct PredictionTable {
    std::vector<int> bag_id;
    std::vector<int> label;
    std::vector<int> pred;
    std::vector<Vector> scores;
};

PredictionTable read_predictions_csv(const std::string& path);
void write_predictions_csv(const EvalReport& report, const std::string& path);

/// JSON report of the statistics battery; `b` adds the paired comparisons.
std::string stats_report(const PredictionTable& a, const PredictionTable* b, const StatsSettings& settings,
                         std::uint64_t seed, int threads);

}  // namespace mcmil

#endif
