// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit tests and the acceptance runner: toy models,
// random inputs, the central-difference gradient checker and brute-force
// retrieval oracles.
#pragma once

#include "assl/models.hpp"
#include "assl/neighborhood.hpp"

#include <functional>
#include <string>
#include <vector>

namespace assl::testing {

/// d=8 (encoder hidden 4), decoder hidden 4, T=5, J=2, C=3.
ModelDims toy_dims();
ModelBundle toy_bundle(std::uint64_t seed = 7);

Frames random_frames(int frames, int joints, Rng &rng, double scale = 1.0);
Matrix random_matrix(int rows, int cols, Rng &rng, double scale = 1.0);
/// Column-stochastic C x B matrix.
Matrix random_distributions(int classes, int batch, Rng &rng);

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "param(i,j)" of the largest error
  std::size_t checked = 0;
};

/// Builds a scalar loss on the given tape. Called once with a recording tape
/// and repeatedly with inference tapes while parameters are perturbed.
using LossBuilder = std::function<Var(Tape &)>;

/// Central differences with step `h` over every entry of `params`. The
/// relative error is |a - n| / max(|a|, |n|, floor).
GradCheck check_gradients(const std::vector<Parameter *> &params, const LossBuilder &loss,
                          double h = 1e-5, double floor = 1e-6);

/// Semi-gradient variant: analytic gradients come from `loss`, differences
/// from `frozen`, which must rebuild the same value with every
/// stop-gradient target replaced by its value at the unperturbed parameters.
GradCheck check_gradients(const std::vector<Parameter *> &params, const LossBuilder &loss,
                          const LossBuilder &frozen, double h = 1e-5, double floor = 1e-6);

/// Exhaustive scan: the K unlabeled ids closest to `feature`, excluding
/// `anchor_id`, ordered by (distance, id).
std::vector<std::string> brute_force_knn(const std::vector<std::string> &ids, const Matrix &pool,
                                         const std::string &anchor_id, const Vector &feature,
                                         int k);

/// Exhaustive positive selection for one neighbor list.
std::vector<std::string> brute_force_positives(const std::vector<std::string> &unlabeled_ids,
                                               const Matrix &unlabeled,
                                               const std::vector<std::string> &labeled_ids,
                                               const Matrix &labeled,
                                               const std::vector<int> &labels,
                                               const std::string &anchor_id,
                                               const std::vector<std::string> &neighbor_ids);

/// Random bank with ids "u<i>" and "l<i>"; labels uniform over `classes`.
FeatureBank random_bank(int unlabeled, int labeled, int d, int classes, Rng &rng);

}  // namespace assl::testing
