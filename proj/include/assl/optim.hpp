// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "assl/autodiff.hpp"

#include <span>
#include <vector>

namespace assl {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step and indexed by position in the parameter list, so the same list (in
/// the same order) must be passed on every step.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void step(std::span<ad::Parameter *const> params, std::span<const ad::Matrix> grads,
            double lr);
  long steps() const { return t_; }

 private:
  AdamOptions options_;
  std::vector<ad::Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace assl
