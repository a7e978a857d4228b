// SPDX-License-Identifier: Apache-2.0
/**
 * @file   baselines.hpp
 * @brief  Training strategies: the ASSL family of ablation variants plus the
 *         comparison methods (pseudo-labels, VAT, VAT + EntMin,
 *         S4L-inpainting).
 *
 * A strategy is pure configuration. The trainer runs every strategy through
 * the same loop and only consults the term flags below.
 */
#pragma once

#include "assl/losses.hpp"
#include "assl/models.hpp"
#include "assl/random.hpp"

#include <map>
#include <string>
#include <vector>

namespace assl {

struct StrategySpec {
  std::string name = "assl";
  std::map<std::string, double> hyperparameters;

  bool inpainting = false;
  bool neighborhood = false;
  bool adversarial = false;
  bool vat = false;
  bool entmin = false;
  bool pseudo_labels = false;

  /// Resolves flags and default hyperparameters for a named strategy and
  /// applies `overrides`. Throws ConfigError for unknown names, unknown
  /// hyperparameters or out-of-range values.
  static StrategySpec make(const std::string &name,
                           const std::map<std::string, double> &overrides = {});

  double hyper(const std::string &key) const;
  /// True when any unlabeled-pool term is active.
  bool uses_unlabeled() const { return inpainting || neighborhood || adversarial || vat || entmin; }
};

/// The closed set of strategy names, comparison methods first.
const std::vector<std::string> &strategy_names();
/// The eight SSL on/off variants, without and then with adversarial training.
const std::vector<std::string> &ablation_variant_names();
/// Default hyperparameters shared by every strategy.
const std::map<std::string, double> &default_hyperparameters();

// ---------------------------------------------------------------------------
// Pseudo-labels

/// Per column of C x N probabilities: argmax class (ties to the lowest
/// index) when its probability exceeds `threshold`, otherwise -1. A zero
/// threshold accepts every column.
std::vector<int> select_pseudo_labels(const Matrix &probs, double threshold);

/// Labels the unlabeled pool with the current model and returns a split whose
/// labeled pool is the union of the original labels and the accepted
/// pseudo-labels. The unlabeled pool is left unchanged.
DatasetSplit pseudo_label_round(const ModelBundle &m, const DatasetSplit &split, double threshold,
                                int frames, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Virtual adversarial training

struct VatOptions {
  double epsilon = 2.0;
  double xi = 1e-6;
  int power_iters = 1;

  void validate() const;
};

/// Scales each sample's block of a (J*3) x (T*B) direction to unit norm.
/// Samples with a zero block are left at zero.
Matrix normalize_per_sample(const Matrix &d, int steps, int batch);

/// epsilon times the per-sample unit direction reached by `power_iters`
/// rounds of power iteration from a random start.
Matrix vat_perturbation(const ModelBundle &m, const Matrix &x, int steps, int batch,
                        const VatOptions &opt, Rng &rng);

/// Mean over samples of KL(f(x), f(x + r)) with f(x) held constant.
Var vat_consistency(Tape &tape, const ModelBundle &m, const Matrix &x, const Matrix &r, int steps,
                    int batch);
Var vat_loss(Tape &tape, const ModelBundle &m, const Matrix &x, int steps, int batch,
             const VatOptions &opt, Rng &rng);
double vat_loss(const ModelBundle &m, const Frames &x, const VatOptions &opt, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Entropy minimization

/// Mean over samples of -sum_c p_c log p_c.
double entmin_loss(std::span<const Vector> preds);
Var entmin_loss(Var probs);

// ---------------------------------------------------------------------------
// S4L-inpainting

/// supervised + lambda1 * inpainting with every other term disabled.
LossReport s4l_inpainting_objective(double l_sup, double l_inp, double lambda1 = 1.0,
                                    double lambda2 = 0.1);

}  // namespace assl
