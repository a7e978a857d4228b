// SPDX-License-Identifier: Apache-2.0
/**
 * @file   neighborhood.hpp
 * @brief  Feature bank over the training corpus, exact K-nearest-neighbor
 *         retrieval, attention-weighted local centers and positive-neighbor
 *         selection through 1-NN labeled lookup.
 *
 * Distances are Euclidean in translated-feature space. Every ordering ties
 * on ascending sample id.
 */
#pragma once

#include "assl/models.hpp"
#include "assl/skeleton_data.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace assl {

/// Immutable snapshot of translated features for the labeled and unlabeled
/// training pools.
class FeatureBank {
 public:
  FeatureBank() = default;
  /// Throws ContractError on size mismatches or duplicate ids.
  FeatureBank(std::vector<std::string> unlabeled_ids, Matrix unlabeled_features,
              std::vector<std::string> labeled_ids, Matrix labeled_features,
              std::vector<int> labeled_labels, int built_at_epoch);

  const std::vector<std::string> &unlabeled_ids() const { return unlabeled_ids_; }
  const Matrix &unlabeled_features() const { return unlabeled_features_; }
  const std::vector<std::string> &labeled_ids() const { return labeled_ids_; }
  const Matrix &labeled_features() const { return labeled_features_; }
  const std::vector<int> &labeled_labels() const { return labeled_labels_; }
  int built_at_epoch() const { return built_at_epoch_; }

  std::size_t size() const { return unlabeled_ids_.size() + labeled_ids_.size(); }
  int feature_width() const;
  /// Column of an unlabeled id, or -1.
  int unlabeled_index(const std::string &id) const;
  int labeled_index(const std::string &id) const;
  /// Bank feature of any id (labeled or unlabeled). Throws ContractError.
  Vector feature(const std::string &id) const;
  /// Label of the nearest labeled feature to unlabeled entry `index`.
  /// Throws ConfigError when the labeled pool is empty.
  int nearest_labeled_label(int unlabeled_index) const;

 private:
  std::vector<std::string> unlabeled_ids_;
  Matrix unlabeled_features_;
  std::vector<std::string> labeled_ids_;
  Matrix labeled_features_;
  std::vector<int> labeled_labels_;
  int built_at_epoch_ = -1;
  std::unordered_map<std::string, int> unlabeled_index_;
  std::unordered_map<std::string, int> labeled_index_;
  std::vector<int> nn_label_;
};

struct NeighborSet {
  std::string anchor_id;
  std::vector<std::string> neighbor_ids;
  std::vector<double> distances;  // ascending
  std::vector<int> indices;       // columns in the unlabeled pool
};

struct PositiveSet {
  std::string anchor_id;
  std::vector<std::string> positive_ids;
  std::vector<int> indices;  // columns in the unlabeled pool
};

/// Encodes and translates every labeled and unlabeled training sample with a
/// fixed frame-sampling seed.
FeatureBank rebuild_bank(const ModelBundle &m, const DatasetSplit &split, int frames,
                         std::uint64_t seed, int epoch = 0);

/// Exact K nearest unlabeled features, excluding `anchor_id` itself. Throws
/// ContractError when K exceeds the eligible pool.
NeighborSet knn_query(const FeatureBank &bank, const std::string &anchor_id,
                      const Vector &anchor_feature, int k);

/// Index of the nearest labeled feature (ties by id). Throws ConfigError on
/// an empty labeled pool.
int nearest_labeled(const FeatureBank &bank, const Vector &feature);

/// Neighbor k is positive iff its 1-NN labeled label equals the anchor's.
PositiveSet select_positive(const NeighborSet &ns, const FeatureBank &bank);

/// softmax_k(aggregate_score(|anchor - neighbor_k|)); neighbors are d x K.
Vector attention_weights(const ModelBundle &m, const Vector &anchor, const Matrix &neighbors);
/// sum_k w_k * neighbors.col(k).
Vector local_center(const Vector &weights, const Matrix &neighbors);

/// Fraction of (anchor, neighbor) pairs sharing the ground-truth label.
/// Anchors and neighbors are looked up in `truth`.
double neighbor_quality_ratio(std::span<const NeighborSet> sets, const EvaluationLabels &truth);

/// Neighborhoods of every unlabeled bank entry, queried with its own bank
/// feature.
std::vector<NeighborSet> bank_neighborhoods(const FeatureBank &bank, int k);

/// CSV rows (anchor_id, neighbor_id, distance, is_positive).
void write_neighbor_dump(const std::filesystem::path &path, std::span<const NeighborSet> sets,
                         const FeatureBank &bank);

// ---------------------------------------------------------------------------
// Tape forms for a batch of B anchors with K neighbors each. Neighbor
// features are d x (B*K) bank constants, anchor b owning columns
// [b*K, (b+1)*K).

/// 1 x (B*K) attention weights, softmax within each anchor's group.
Var attention_weights(Tape &tape, const ModelBundle &m, Var anchors, const Matrix &neighbors,
                      int k);
/// d x B local centers.
Var local_center(Var weights, Var neighbors, int k);

}  // namespace assl
