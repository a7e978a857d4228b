// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Optimization loop: batch composition, per-epoch feature-bank
 *         refresh, alternating discriminator/model updates, learning-rate
 *         schedule, evaluation, ablation sweeps and embedding export.
 */
#pragma once

#include "assl/baselines.hpp"
#include "assl/losses.hpp"
#include "assl/models.hpp"
#include "assl/neighborhood.hpp"
#include "assl/optim.hpp"
#include "assl/skeleton_data.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace assl {

struct TrainConfig {
  StrategySpec strategy = StrategySpec::make("assl");
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  int K = 10;
  int T = 40;
  int batch_labeled = 16;
  int batch_unlabeled = 16;
  int epochs = 100;
  double lr = 0.0005;
  double lr_decay = 0.5;
  int lr_decay_every = 30;
  std::uint64_t seed = 0;
  bool kl_target_stop_gradient = true;
  double mask_fraction = 0.25;
  /// Discriminator updates per model update.
  int disc_steps = 1;
  int encoder_hidden = 512;
  int decoder_hidden = 512;
  double labels_fraction = 0.1;
  double test_fraction = 1.0 / 3.0;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  /// lr * lr_decay^floor(epoch / lr_decay_every) for a 0-based epoch.
  double learning_rate(int epoch) const;
  ModelDims model_dims(int joints, int classes) const;

  std::uint64_t split_seed() const;
  std::uint64_t init_seed() const;
  /// Frame-sampling seed used by the feature bank, evaluation and export.
  std::uint64_t feature_seed() const;
};

struct MetricsRow {
  int epoch = 0;
  LossReport loss;
  double train_disc_accuracy = 0.0;
  double test_accuracy = 0.0;
  double neighbor_quality_ratio = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

/// metrics.csv holds every MetricsRow field except wall_seconds, which goes
/// to a separate timing file so that the metrics stay bitwise reproducible.
std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow &row);
void write_metrics_csv(const std::filesystem::path &path, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path &path);
void write_timing_csv(const std::filesystem::path &path, std::span<const MetricsRow> rows);

// ---------------------------------------------------------------------------
// Batches

/// Positions into the labeled and unlabeled pools of a split.
struct Batch {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
};

/// One epoch: both pools shuffled with an epoch-derived seed, the unlabeled
/// pool visited exactly once, the labeled pool cycled alongside. Throws
/// ConfigError when either pool is empty.
std::vector<Batch> make_batches(const DatasetSplit &split, const TrainConfig &cfg, int epoch);

/// Prepared network inputs of a batch.
struct StepInput {
  std::vector<std::string> labeled_ids;
  std::vector<Frames> labeled;
  std::vector<int> labels;
  std::vector<std::string> unlabeled_ids;
  std::vector<Frames> unlabeled;
};

StepInput assemble_batch(const DatasetSplit &split, const Batch &batch, int frames,
                         std::uint64_t frame_seed);

// ---------------------------------------------------------------------------
// Steps

/// Model plus its two optimizer states.
struct TrainState {
  ModelBundle bundle;
  Adam model_opt;
  Adam disc_opt;
};

struct DiscStepResult {
  double bce_before = 0.0;  // -adversarial_loss before the update
  double accuracy = 0.0;    // labeled scored > 0.5, unlabeled < 0.5
};

/// One ascent step of the discriminator on frozen features (d x L, d x U).
DiscStepResult discriminator_step(ModelBundle &m, Adam &opt, const Matrix &labeled_features,
                                  const Matrix &unlabeled_features, double lr);

struct StepResult {
  LossReport report;
  double disc_accuracy = 0.0;
};

/// Discriminator sub-step (when adversarial training is active) followed by
/// the model sub-step with the discriminator frozen. `bank` is required when
/// the strategy uses neighborhoods. Throws NumericError naming a non-finite
/// loss term.
StepResult train_step(TrainState &state, const StepInput &batch, const FeatureBank *bank,
                      const TrainConfig &cfg, double lr, Rng &rng);

/// Loss of one batch without any update, with the same term wiring as
/// train_step. Used by tests and diagnostics.
LossReport batch_objective(const ModelBundle &m, const StepInput &batch, const FeatureBank *bank,
                           const TrainConfig &cfg, Rng &rng);

// ---------------------------------------------------------------------------
// Evaluation

/// Argmax class per sequence (ties to the lowest index).
std::vector<int> predict_labels(const ModelBundle &m, std::span<const SkeletonSequence> seqs,
                                int frames, std::uint64_t seed);
/// Fraction of correct predictions. Throws ContractError on an empty set.
double evaluate(const ModelBundle &m, std::span<const SkeletonSequence> test, int frames,
                std::uint64_t seed);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentOptions {
  /// When set: metrics.csv, timing.csv, checkpoint.bin (+ .json) and
  /// summary.json are written here.
  std::optional<std::filesystem::path> out_dir;
  /// Writes neighbors_epoch<N>.csv after every bank rebuild.
  bool dump_neighbors = false;
  std::function<void(const MetricsRow &)> on_epoch;
};

struct ExperimentResult {
  ModelBundle bundle;  // final parameters
  std::vector<MetricsRow> rows;
  double best_accuracy = 0.0;
  int best_epoch = -1;  // -1: the initialized model
  double final_accuracy = 0.0;
};

/// Trains from a fresh initialization. Pseudo-label strategies first train
/// silently on the labeled pool, relabel, then run the emitted training.
ExperimentResult run_experiment(const TrainConfig &cfg, const DatasetSplit &split,
                                const ExperimentOptions &options = {});

/// Seeded split of `data` followed by run_experiment.
ExperimentResult run_seeded(const TrainConfig &cfg, std::span<const SkeletonSequence> data,
                            const ExperimentOptions &options = {});

struct RunSummary {
  std::string strategy;
  double fraction = 0.0;
  std::uint64_t seed = 0;
  int K = 0;
  int epochs = 0;
  double best_accuracy = 0.0;
  int best_epoch = -1;
  double final_accuracy = 0.0;
  double first_nqr = 0.0;
  double final_nqr = 0.0;
};

RunSummary summarize_run(const TrainConfig &cfg, const ExperimentResult &r);
void write_summary_json(const std::filesystem::path &path, const RunSummary &s);
RunSummary read_summary_json(const std::filesystem::path &path);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string variant;
  int seeds = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;  // sample standard deviation, 0 for one seed
  std::vector<double> per_seed;
};

/// Mean and sample standard deviation of per-seed accuracies.
AblationRow summarize_accuracies(const std::string &variant, std::span<const double> accs);

struct KSweepPoint {
  int K = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::vector<double> per_seed;
};

struct AblationOptions {
  std::vector<std::string> variants = {"sup",     "sup_inp",     "sup_nei",     "sup_inp_nei",
                                       "sup_adv", "sup_inp_adv", "sup_nei_adv", "assl"};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  /// Empty disables the K sweep.
  std::vector<int> k_values = {1, 2, 5, 10, 20};
  int k_seeds = 3;
  int threads = 1;
  /// Per-run artifacts under runs/<variant>_K<k>_seed<s>/ when set.
  std::optional<std::filesystem::path> out_dir;
};

struct AblationReport {
  std::vector<AblationRow> table;
  std::vector<KSweepPoint> k_curve;
  std::vector<RunSummary> runs;
  /// Mean neighbor-quality ratio per epoch of the "assl" runs, if any.
  std::vector<double> nqr_curve;
};

AblationReport run_ablation(const TrainConfig &base, std::span<const SkeletonSequence> data,
                            const AblationOptions &options);

void write_ablation_csv(const std::filesystem::path &path, std::span<const AblationRow> rows);
void write_k_sweep_csv(const std::filesystem::path &path, std::span<const KSweepPoint> points);

// ---------------------------------------------------------------------------
// Export

/// TSV with a header row, then one row per labeled, unlabeled and test sample:
/// id, split, true_label, then d translated-feature columns.
void export_embeddings(const ModelBundle &m, const DatasetSplit &split, int frames,
                       std::uint64_t seed, const std::filesystem::path &path);

}  // namespace assl
