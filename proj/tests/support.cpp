// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace assl::testing {

ModelDims toy_dims() { return ModelDims::scaled(2, 3, 5, 4, 4); }

ModelBundle toy_bundle(std::uint64_t seed) { return ModelBundle::create(toy_dims(), seed); }

Frames random_frames(int frames, int joints, Rng &rng, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  Frames f(frames, joints);
  for (double &v : f.data()) v = g(rng);
  return f;
}

Matrix random_matrix(int rows, int cols, Rng &rng, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Matrix random_distributions(int classes, int batch, Rng &rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Matrix m(classes, batch);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  for (Eigen::Index c = 0; c < m.cols(); ++c) m.col(c) /= m.col(c).sum();
  return m;
}

GradCheck check_gradients(const std::vector<Parameter *> &params, const LossBuilder &loss,
                          double h, double floor) {
  return check_gradients(params, loss, loss, h, floor);
}

GradCheck check_gradients(const std::vector<Parameter *> &params, const LossBuilder &loss,
                          const LossBuilder &frozen, double h, double floor) {
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
    for (Parameter *p : params) analytic.push_back(tape.grad(*p));
  }
  auto eval = [&] {
    Tape tape(false);
    return frozen(tape).scalar();
  };
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix &v = params[k]->value;
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double orig = v(i, j);
        v(i, j) = orig + h;
        const double fp = eval();
        v(i, j) = orig - h;
        const double fm = eval();
        v(i, j) = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double a = analytic[k](i, j);
        const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
        ++out.checked;
        if (rel > out.max_rel_error) {
          out.max_rel_error = rel;
          out.worst = params[k]->name + "(" + std::to_string(i) + "," + std::to_string(j) + ")";
        }
      }
  }
  return out;
}

std::vector<std::string> brute_force_knn(const std::vector<std::string> &ids, const Matrix &pool,
                                         const std::string &anchor_id, const Vector &feature,
                                         int k) {
  std::vector<std::pair<double, std::string>> all;
  for (Eigen::Index c = 0; c < pool.cols(); ++c) {
    if (ids[c] == anchor_id) continue;
    double d2 = 0.0;
    for (Eigen::Index r = 0; r < pool.rows(); ++r) {
      const double diff = pool(r, c) - feature(r);
      d2 += diff * diff;
    }
    all.emplace_back(d2, ids[c]);
  }
  std::sort(all.begin(), all.end());
  std::vector<std::string> out;
  for (int i = 0; i < k && i < static_cast<int>(all.size()); ++i) out.push_back(all[i].second);
  return out;
}

namespace {

int brute_nn_label(const std::vector<std::string> &labeled_ids, const Matrix &labeled,
                   const std::vector<int> &labels, const Vector &x) {
  std::vector<std::pair<double, std::string>> all;
  for (Eigen::Index c = 0; c < labeled.cols(); ++c) {
    double d2 = 0.0;
    for (Eigen::Index r = 0; r < labeled.rows(); ++r) {
      const double diff = labeled(r, c) - x(r);
      d2 += diff * diff;
    }
    all.emplace_back(d2, labeled_ids[c]);
  }
  const auto best = std::min_element(all.begin(), all.end());
  const auto pos = std::find(labeled_ids.begin(), labeled_ids.end(), best->second);
  return labels[static_cast<std::size_t>(pos - labeled_ids.begin())];
}

}  // namespace

std::vector<std::string> brute_force_positives(const std::vector<std::string> &unlabeled_ids,
                                               const Matrix &unlabeled,
                                               const std::vector<std::string> &labeled_ids,
                                               const Matrix &labeled,
                                               const std::vector<int> &labels,
                                               const std::string &anchor_id,
                                               const std::vector<std::string> &neighbor_ids) {
  auto feature_of = [&](const std::string &id) -> Vector {
    for (std::size_t i = 0; i < unlabeled_ids.size(); ++i)
      if (unlabeled_ids[i] == id) return unlabeled.col(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < labeled_ids.size(); ++i)
      if (labeled_ids[i] == id) return labeled.col(static_cast<Eigen::Index>(i));
    throw std::runtime_error("unknown id " + id);
  };
  const int anchor_label = brute_nn_label(labeled_ids, labeled, labels, feature_of(anchor_id));
  std::vector<std::string> out;
  for (const std::string &n : neighbor_ids)
    if (brute_nn_label(labeled_ids, labeled, labels, feature_of(n)) == anchor_label)
      out.push_back(n);
  return out;
}

FeatureBank random_bank(int unlabeled, int labeled, int d, int classes, Rng &rng) {
  std::vector<std::string> uids, lids;
  for (int i = 0; i < unlabeled; ++i) uids.push_back("u" + std::to_string(i));
  for (int i = 0; i < labeled; ++i) lids.push_back("l" + std::to_string(i));
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::vector<int> labels;
  for (int i = 0; i < labeled; ++i) labels.push_back(cls(rng));
  Matrix uf = random_matrix(d, unlabeled, rng);
  Matrix lf = random_matrix(d, labeled, rng);
  return FeatureBank(uids, uf, lids, lf, labels, 0);
}

}  // namespace assl::testing
