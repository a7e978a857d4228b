// SPDX-License-Identifier: Apache-2.0
#include "assl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace assl {

void Adam::step(std::span<ad::Parameter *const> params, std::span<const ad::Matrix> grads,
                double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("Adam::step: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const ad::Parameter *p : params) {
      m_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  } else if (m_.size() != params.size()) {
    throw std::invalid_argument("Adam::step: parameter list changed between steps");
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Matrix &g = grads[i];
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    params[i]->value.array() -=
        lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + options_.epsilon);
  }
}

}  // namespace assl
