// SPDX-License-Identifier: Apache-2.0
/**
 * @file   losses.hpp
 * @brief  Objective terms: supervised and center cross-entropy, inpainting
 *         MSE, neighborhood KL consistency, adversarial alignment and the
 *         weighted total.
 *
 * Each term has a tape form used in training and a plain value form over
 * class distributions. Probabilities are floored at kProbFloor before logs.
 */
#pragma once

#include "assl/autodiff.hpp"
#include "assl/skeleton_data.hpp"

#include <span>
#include <vector>

namespace assl {

using ad::Var;
using ad::Vector;

inline constexpr double kProbFloor = 1e-8;

/// One epoch- or step-level breakdown of the objective.
struct LossReport {
  double l_sup = 0.0;
  double l_kl = 0.0;
  double l_ce_center = 0.0;
  double l_inp = 0.0;
  double l_unlabeled = 0.0;  // l_kl + l_ce_center + l_inp
  double l_adv = 0.0;
  double l_vat = 0.0;     // baseline regularizers, zero for the ASSL family
  double l_entmin = 0.0;
  double total = 0.0;     // l_sup + lambda1 * l_unlabeled + lambda2 * l_adv (+ l_vat + l_entmin)
  double lambda1 = 1.0;
  double lambda2 = 0.1;
};

struct LossTerms {
  double l_sup = 0.0;
  double l_kl = 0.0;
  double l_ce_center = 0.0;
  double l_inp = 0.0;
  double l_adv = 0.0;
  double l_vat = 0.0;
  double l_entmin = 0.0;
};

/// Throws ConfigError for negative weights.
LossReport total_objective(const LossTerms &terms, double lambda1 = 1.0, double lambda2 = 0.1);

// ---------------------------------------------------------------------------
// Value forms

/// Mean squared error over every entry of the (T, J, 3) arrays.
double inpainting_loss(const Frames &recon, const Frames &original, const MaskSpec &m);
/// sum_c p_c (log p_c - log q_c); `p` is the reference distribution.
double kl_divergence(const Vector &p, const Vector &q);
/// Mean of -log p[y]. Throws ContractError for out-of-range labels.
double cross_entropy(std::span<const Vector> preds, std::span<const int> labels);
inline double supervised_loss(std::span<const Vector> preds, std::span<const int> labels) {
  return cross_entropy(preds, labels);
}
inline double center_ce_loss(std::span<const Vector> centers, std::span<const int> labels) {
  return cross_entropy(centers, labels);
}
/// mean log D(labeled) + mean log(1 - D(unlabeled)). Always <= 0.
double adversarial_loss(std::span<const double> labeled_scores,
                        std::span<const double> unlabeled_scores);

/// Predictions attached to one unlabeled anchor.
struct AnchorPredictions {
  Vector center;                  // f_c(c_u)
  Vector anchor;                  // f_c(h_u)
  std::vector<Vector> positives;  // f_c(h_u^k), k in the positive set
};
/// Sum over anchors of KL(center, anchor) + sum KL(center, positive), divided
/// by the anchor count.
double neighborhood_kl_loss(std::span<const AnchorPredictions> anchors);

// ---------------------------------------------------------------------------
// Tape forms. Distributions are C x B with one column per sample.

/// Columnwise KL(p || q) as a 1 x B row.
Var kl_divergence_cols(Var p, Var q);
Var inpainting_loss(Var recon, Var original);
Var cross_entropy(Var probs, std::span<const int> labels);
Var adversarial_loss(Var labeled_scores, Var unlabeled_scores);
/// `positive_probs` columns belong to anchors `positive_owner[i]`; pass an
/// invalid Var when there are no positives. With `stop_target` the center
/// predictions are treated as constants.
Var neighborhood_kl_loss(Var center_probs, Var anchor_probs, Var positive_probs,
                         std::span<const Eigen::Index> positive_owner, bool stop_target);

}  // namespace assl
