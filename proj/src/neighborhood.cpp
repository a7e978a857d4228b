// SPDX-License-Identifier: Apache-2.0
#include "assl/neighborhood.hpp"

#include "assl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace assl {

namespace {

struct Candidate {
  double dist2;
  int index;
};

// Nearest column of `pool` to `x` by (squared distance, id).
int argmin_by_distance(const Matrix &pool, const std::vector<std::string> &ids, const Vector &x) {
  int best = -1;
  double best_d = 0.0;
  for (Eigen::Index c = 0; c < pool.cols(); ++c) {
    const double d = (pool.col(c) - x).squaredNorm();
    if (best < 0 || d < best_d || (d == best_d && ids[c] < ids[best])) {
      best = static_cast<int>(c);
      best_d = d;
    }
  }
  return best;
}

}  // namespace

FeatureBank::FeatureBank(std::vector<std::string> unlabeled_ids, Matrix unlabeled_features,
                         std::vector<std::string> labeled_ids, Matrix labeled_features,
                         std::vector<int> labeled_labels, int built_at_epoch)
    : unlabeled_ids_(std::move(unlabeled_ids)),
      unlabeled_features_(std::move(unlabeled_features)),
      labeled_ids_(std::move(labeled_ids)),
      labeled_features_(std::move(labeled_features)),
      labeled_labels_(std::move(labeled_labels)),
      built_at_epoch_(built_at_epoch) {
  if (static_cast<Eigen::Index>(unlabeled_ids_.size()) != unlabeled_features_.cols() ||
      static_cast<Eigen::Index>(labeled_ids_.size()) != labeled_features_.cols() ||
      labeled_ids_.size() != labeled_labels_.size())
    throw ContractError("FeatureBank: id, feature and label counts disagree");
  if (!unlabeled_ids_.empty() && !labeled_ids_.empty() &&
      unlabeled_features_.rows() != labeled_features_.rows())
    throw ContractError("FeatureBank: labeled and unlabeled feature widths differ");
  for (std::size_t i = 0; i < unlabeled_ids_.size(); ++i)
    if (!unlabeled_index_.emplace(unlabeled_ids_[i], static_cast<int>(i)).second)
      throw ContractError("FeatureBank: duplicate id '" + unlabeled_ids_[i] + "'");
  for (std::size_t i = 0; i < labeled_ids_.size(); ++i)
    if (!labeled_index_.emplace(labeled_ids_[i], static_cast<int>(i)).second ||
        unlabeled_index_.contains(labeled_ids_[i]))
      throw ContractError("FeatureBank: duplicate id '" + labeled_ids_[i] + "'");
  if (!labeled_ids_.empty()) {
    nn_label_.resize(unlabeled_ids_.size());
    for (std::size_t i = 0; i < unlabeled_ids_.size(); ++i)
      nn_label_[i] = labeled_labels_[argmin_by_distance(
          labeled_features_, labeled_ids_, unlabeled_features_.col(static_cast<Eigen::Index>(i)))];
  }
}

int FeatureBank::feature_width() const {
  return static_cast<int>(unlabeled_ids_.empty() ? labeled_features_.rows()
                                                 : unlabeled_features_.rows());
}

int FeatureBank::unlabeled_index(const std::string &id) const {
  auto it = unlabeled_index_.find(id);
  return it == unlabeled_index_.end() ? -1 : it->second;
}

int FeatureBank::labeled_index(const std::string &id) const {
  auto it = labeled_index_.find(id);
  return it == labeled_index_.end() ? -1 : it->second;
}

Vector FeatureBank::feature(const std::string &id) const {
  if (int i = unlabeled_index(id); i >= 0) return unlabeled_features_.col(i);
  if (int i = labeled_index(id); i >= 0) return labeled_features_.col(i);
  throw ContractError("FeatureBank: unknown id '" + id + "'");
}

int FeatureBank::nearest_labeled_label(int unlabeled_index) const {
  if (labeled_ids_.empty()) throw ConfigError("feature bank has no labeled samples");
  return nn_label_.at(static_cast<std::size_t>(unlabeled_index));
}

// ---------------------------------------------------------------------------

FeatureBank rebuild_bank(const ModelBundle &m, const DatasetSplit &split, int frames,
                         std::uint64_t seed, int epoch) {
  std::vector<std::string> uids, lids;
  std::vector<int> labels;
  for (const SkeletonSequence &s : split.unlabeled()) uids.push_back(s.id);
  for (const SkeletonSequence &s : split.labeled()) {
    lids.push_back(s.id);
    labels.push_back(s.label.value());
  }
  Matrix uf = embed_sequences(m, split.unlabeled(), frames, seed);
  Matrix lf = embed_sequences(m, split.labeled(), frames, seed);
  return FeatureBank(std::move(uids), std::move(uf), std::move(lids), std::move(lf),
                     std::move(labels), epoch);
}

NeighborSet knn_query(const FeatureBank &bank, const std::string &anchor_id,
                      const Vector &anchor_feature, int k) {
  const Matrix &pool = bank.unlabeled_features();
  const auto &ids = bank.unlabeled_ids();
  const int self = bank.unlabeled_index(anchor_id);
  const int eligible = static_cast<int>(ids.size()) - (self >= 0 ? 1 : 0);
  if (k < 1 || k > eligible)
    throw ContractError("knn_query: K=" + std::to_string(k) + " but only " +
                        std::to_string(eligible) + " eligible unlabeled samples");
  if (anchor_feature.size() != pool.rows())
    throw ContractError("knn_query: anchor feature width mismatch");

  std::vector<Candidate> cand;
  cand.reserve(ids.size());
  for (Eigen::Index c = 0; c < pool.cols(); ++c) {
    if (c == self) continue;
    cand.push_back({(pool.col(c) - anchor_feature).squaredNorm(), static_cast<int>(c)});
  }
  auto less = [&](const Candidate &a, const Candidate &b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    return ids[a.index] < ids[b.index];
  };
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), less);

  NeighborSet ns;
  ns.anchor_id = anchor_id;
  for (int i = 0; i < k; ++i) {
    ns.neighbor_ids.push_back(ids[cand[i].index]);
    ns.distances.push_back(std::sqrt(cand[i].dist2));
    ns.indices.push_back(cand[i].index);
  }
  return ns;
}

int nearest_labeled(const FeatureBank &bank, const Vector &feature) {
  if (bank.labeled_ids().empty()) throw ConfigError("feature bank has no labeled samples");
  return argmin_by_distance(bank.labeled_features(), bank.labeled_ids(), feature);
}

PositiveSet select_positive(const NeighborSet &ns, const FeatureBank &bank) {
  if (bank.labeled_ids().empty()) throw ConfigError("feature bank has no labeled samples");
  int anchor_label;
  if (int i = bank.unlabeled_index(ns.anchor_id); i >= 0)
    anchor_label = bank.nearest_labeled_label(i);
  else
    anchor_label = bank.labeled_labels()[nearest_labeled(bank, bank.feature(ns.anchor_id))];

  PositiveSet ps;
  ps.anchor_id = ns.anchor_id;
  for (std::size_t k = 0; k < ns.neighbor_ids.size(); ++k) {
    int idx = k < ns.indices.size() ? ns.indices[k] : bank.unlabeled_index(ns.neighbor_ids[k]);
    if (idx < 0) throw ContractError("select_positive: neighbor '" + ns.neighbor_ids[k] +
                                     "' is not in the unlabeled pool");
    if (bank.nearest_labeled_label(idx) == anchor_label) {
      ps.positive_ids.push_back(ns.neighbor_ids[k]);
      ps.indices.push_back(idx);
    }
  }
  return ps;
}

Vector attention_weights(const ModelBundle &m, const Vector &anchor, const Matrix &neighbors) {
  if (neighbors.cols() < 1) throw ContractError("attention_weights: need K >= 1");
  Tape tape(false);
  Var a = tape.constant(anchor);
  Var w = attention_weights(tape, m, a, neighbors, static_cast<int>(neighbors.cols()));
  return w.value().row(0).transpose();
}

Vector local_center(const Vector &weights, const Matrix &neighbors) {
  if (weights.size() != neighbors.cols()) throw ContractError("local_center: size mismatch");
  return neighbors * weights;
}

double neighbor_quality_ratio(std::span<const NeighborSet> sets, const EvaluationLabels &truth) {
  std::size_t pairs = 0, agree = 0;
  for (const NeighborSet &ns : sets) {
    const int a = truth.at(ns.anchor_id);
    for (const std::string &n : ns.neighbor_ids) {
      ++pairs;
      if (truth.at(n) == a) ++agree;
    }
  }
  return pairs == 0 ? 0.0 : static_cast<double>(agree) / static_cast<double>(pairs);
}

std::vector<NeighborSet> bank_neighborhoods(const FeatureBank &bank, int k) {
  std::vector<NeighborSet> out;
  out.reserve(bank.unlabeled_ids().size());
  for (std::size_t i = 0; i < bank.unlabeled_ids().size(); ++i)
    out.push_back(knn_query(bank, bank.unlabeled_ids()[i],
                            bank.unlabeled_features().col(static_cast<Eigen::Index>(i)), k));
  return out;
}

void write_neighbor_dump(const std::filesystem::path &path, std::span<const NeighborSet> sets,
                         const FeatureBank &bank) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write neighbor dump '" + path.string() + "'");
  out << "anchor_id,neighbor_id,distance,is_positive\n" << std::setprecision(17);
  for (const NeighborSet &ns : sets) {
    const PositiveSet ps = select_positive(ns, bank);
    for (std::size_t k = 0; k < ns.neighbor_ids.size(); ++k) {
      const bool pos = std::find(ps.positive_ids.begin(), ps.positive_ids.end(),
                                 ns.neighbor_ids[k]) != ps.positive_ids.end();
      out << ns.anchor_id << ',' << ns.neighbor_ids[k] << ',' << ns.distances[k] << ','
          << (pos ? 1 : 0) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------

Var attention_weights(Tape &tape, const ModelBundle &m, Var anchors, const Matrix &neighbors,
                      int k) {
  if (k < 1 || neighbors.cols() != anchors.cols() * k || neighbors.rows() != anchors.rows())
    throw ContractError("attention_weights: expected d x (B*K) neighbors for d x B anchors");
  Var diff = ad::abs(ad::repeat_cols(anchors, k) - tape.constant(neighbors));
  return ad::group_softmax(aggregate_score(tape, m, diff), k);
}

Var local_center(Var weights, Var neighbors, int k) {
  return ad::group_sum_cols(ad::mul_row_broadcast(neighbors, weights), k);
}

}  // namespace assl
