// SPDX-License-Identifier: Apache-2.0
#include "assl/losses.hpp"

#include "assl/errors.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace assl {

LossReport total_objective(const LossTerms &t, double lambda1, double lambda2) {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0))
    throw ConfigError("loss weights lambda1 and lambda2 must be non-negative");
  LossReport r;
  r.l_sup = t.l_sup;
  r.l_kl = t.l_kl;
  r.l_ce_center = t.l_ce_center;
  r.l_inp = t.l_inp;
  r.l_adv = t.l_adv;
  r.l_vat = t.l_vat;
  r.l_entmin = t.l_entmin;
  r.lambda1 = lambda1;
  r.lambda2 = lambda2;
  r.l_unlabeled = r.l_kl + r.l_ce_center + r.l_inp;
  r.total = r.l_sup + lambda1 * r.l_unlabeled + lambda2 * r.l_adv;
  if (r.l_vat != 0.0) r.total = r.total + r.l_vat;
  if (r.l_entmin != 0.0) r.total = r.total + r.l_entmin;
  return r;
}

// ---------------------------------------------------------------------------

double inpainting_loss(const Frames &recon, const Frames &original, const MaskSpec &m) {
  if (recon.frames() != original.frames() || recon.joints() != original.joints())
    throw ContractError("inpainting_loss: shape mismatch");
  m.validate(original.frames());
  double s = 0.0;
  const auto &a = recon.data(), &b = original.data();
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double kl_divergence(const Vector &p, const Vector &q) {
  if (p.size() != q.size()) throw ContractError("kl_divergence: size mismatch");
  double s = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c)
    s += p[c] * (std::log(std::max(p[c], kProbFloor)) - std::log(std::max(q[c], kProbFloor)));
  return s;
}

double cross_entropy(std::span<const Vector> preds, std::span<const int> labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw ContractError("cross_entropy: need one label per prediction");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= preds[i].size())
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    s -= std::log(std::max(preds[i][labels[i]], kProbFloor));
  }
  return s / static_cast<double>(preds.size());
}

double adversarial_loss(std::span<const double> labeled_scores,
                        std::span<const double> unlabeled_scores) {
  if (labeled_scores.empty() || unlabeled_scores.empty())
    throw ContractError("adversarial_loss: both score sets must be non-empty");
  double l = 0.0, u = 0.0;
  for (double d : labeled_scores) l += std::log(d);
  for (double d : unlabeled_scores) u += std::log(1.0 - d);
  return l / static_cast<double>(labeled_scores.size()) +
         u / static_cast<double>(unlabeled_scores.size());
}

double neighborhood_kl_loss(std::span<const AnchorPredictions> anchors) {
  if (anchors.empty()) throw ContractError("neighborhood_kl_loss: no anchors");
  double s = 0.0;
  for (const AnchorPredictions &a : anchors) {
    s += kl_divergence(a.center, a.anchor);
    for (const Vector &p : a.positives) s += kl_divergence(a.center, p);
  }
  return s / static_cast<double>(anchors.size());
}

// ---------------------------------------------------------------------------

namespace {
// Scores come out of a clamped sigmoid, so this floor never binds; it only
// keeps log() total.
constexpr double kTinyFloor = std::numeric_limits<double>::min();
}  // namespace

Var kl_divergence_cols(Var p, Var q) {
  Var logp = ad::log_floor(p, kProbFloor);
  Var logq = ad::log_floor(q, kProbFloor);
  return ad::sum_rows(ad::mul(p, logp - logq));
}

Var inpainting_loss(Var recon, Var original) {
  if (recon.rows() != original.rows() || recon.cols() != original.cols())
    throw ContractError("inpainting_loss: shape mismatch");
  return ad::mean(ad::square(recon - original));
}

Var cross_entropy(Var probs, std::span<const int> labels) {
  const Eigen::Index C = probs.rows(), B = probs.cols();
  if (static_cast<Eigen::Index>(labels.size()) != B || B == 0)
    throw ContractError("cross_entropy: need one label per column");
  ad::Matrix onehot = ad::Matrix::Zero(C, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= C)
      throw ContractError("cross_entropy: label " + std::to_string(labels[b]) + " out of range");
    onehot(labels[b], b) = 1.0;
  }
  Var picked = ad::sum(ad::mul(probs.tape().constant(std::move(onehot)),
                               ad::log_floor(probs, kProbFloor)));
  return ad::scale(picked, -1.0 / static_cast<double>(B));
}

Var adversarial_loss(Var labeled_scores, Var unlabeled_scores) {
  Var l = ad::mean(ad::log_floor(labeled_scores, kTinyFloor));
  Var u = ad::mean(ad::log_floor(ad::add_scalar(-unlabeled_scores, 1.0), kTinyFloor));
  return l + u;
}

Var neighborhood_kl_loss(Var center_probs, Var anchor_probs, Var positive_probs,
                         std::span<const Eigen::Index> positive_owner, bool stop_target) {
  const Eigen::Index B = anchor_probs.cols();
  if (B == 0) throw ContractError("neighborhood_kl_loss: no anchors");
  Var target = stop_target ? ad::stop_gradient(center_probs) : center_probs;
  Var total = ad::sum(kl_divergence_cols(target, anchor_probs));
  if (positive_probs.valid() && !positive_owner.empty()) {
    Var owners = ad::gather_cols(target, positive_owner);
    total = total + ad::sum(kl_divergence_cols(owners, positive_probs));
  }
  return ad::scale(total, 1.0 / static_cast<double>(B));
}

}  // namespace assl
