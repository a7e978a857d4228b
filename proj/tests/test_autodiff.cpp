// SPDX-License-Identifier: Apache-2.0
#include "assl/autodiff.hpp"
#include "assl/optim.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

namespace assl {
namespace {

using testing::check_gradients;
using testing::random_matrix;

// Reduces an op output to a scalar with fixed random weights so every
// output entry contributes a distinct gradient.
Var weighted_sum(Tape &tape, Var v, std::uint64_t seed) {
  Rng rng(seed);
  Matrix w = random_matrix(static_cast<int>(v.rows()), static_cast<int>(v.cols()), rng);
  return ad::sum(ad::mul(v, tape.constant(w)));
}

struct OpFixture : ::testing::Test {
  Rng rng{11};
  Parameter a{"a", random_matrix(3, 4, rng)};
  Parameter b{"b", random_matrix(3, 4, rng)};
  Parameter c{"c", random_matrix(4, 2, rng)};
  Parameter col{"col", random_matrix(3, 1, rng)};
  Parameter row{"row", random_matrix(1, 4, rng)};

  void expect_ok(const std::vector<Parameter *> &ps, const testing::LossBuilder &f) {
    const testing::GradCheck g = check_gradients(ps, f);
    EXPECT_LT(g.max_rel_error, 1e-6) << g.worst;
  }
};

TEST_F(OpFixture, ArithmeticGradients) {
  expect_ok({&a, &c}, [&](Tape &t) { return weighted_sum(t, ad::matmul(t.bind(a), t.bind(c)), 1); });
  expect_ok({&a, &b}, [&](Tape &t) { return weighted_sum(t, t.bind(a) + t.bind(b), 2); });
  expect_ok({&a, &b}, [&](Tape &t) { return weighted_sum(t, t.bind(a) - t.bind(b), 3); });
  expect_ok({&a, &b}, [&](Tape &t) { return weighted_sum(t, ad::mul(t.bind(a), t.bind(b)), 4); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, 2.5 * t.bind(a), 5); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::add_scalar(t.bind(a), 0.3), 6); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, -t.bind(a), 7); });
  expect_ok({&a, &col},
            [&](Tape &t) { return weighted_sum(t, ad::add_bias(t.bind(a), t.bind(col)), 8); });
  expect_ok({&a, &row}, [&](Tape &t) {
    return weighted_sum(t, ad::mul_row_broadcast(t.bind(a), t.bind(row)), 9);
  });
}

TEST_F(OpFixture, ElementwiseGradients) {
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::sigmoid(t.bind(a)), 1); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::tanh(t.bind(a)), 2); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::relu(t.bind(a)), 3); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::leaky_relu(t.bind(a), 0.2), 4); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::abs(t.bind(a)), 5); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::exp(t.bind(a)), 6); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::square(t.bind(a)), 7); });
  expect_ok({&a}, [&](Tape &t) {
    return weighted_sum(t, ad::log_floor(ad::exp(t.bind(a)), 1e-8), 8);
  });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::clamp(t.bind(a), -0.5, 0.5), 9); });
}

TEST_F(OpFixture, ReductionAndSoftmaxGradients) {
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::softmax_cols(t.bind(a)), 1); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::group_softmax(t.bind(a), 2), 2); });
  expect_ok({&a}, [&](Tape &t) { return ad::sum(ad::square(t.bind(a))); });
  expect_ok({&a}, [&](Tape &t) { return ad::mean(ad::square(t.bind(a))); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::sum_rows(t.bind(a)), 3); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::group_sum_cols(t.bind(a), 2), 4); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::repeat_cols(t.bind(a), 3), 5); });
}

TEST_F(OpFixture, ShapeGradients) {
  expect_ok({&a, &b}, [&](Tape &t) {
    Var parts[] = {t.bind(a), t.bind(b)};
    return weighted_sum(t, ad::concat_rows(parts), 1);
  });
  expect_ok({&a, &b}, [&](Tape &t) {
    Var parts[] = {t.bind(a), t.bind(b)};
    return weighted_sum(t, ad::concat_cols(parts), 2);
  });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::slice_rows(t.bind(a), 1, 2), 3); });
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::slice_cols(t.bind(a), 1, 2), 4); });
  const Eigen::Index idx[] = {3, 0, 3, 1};
  expect_ok({&a}, [&](Tape &t) { return weighted_sum(t, ad::gather_cols(t.bind(a), idx), 5); });
}

TEST_F(OpFixture, GruCellGradient) {
  Parameter gi{"gi", random_matrix(6, 3, rng)};
  Parameter gh{"gh", random_matrix(6, 3, rng)};
  Parameter h{"h", random_matrix(2, 3, rng)};
  expect_ok({&gi, &gh, &h},
            [&](Tape &t) { return weighted_sum(t, ad::gru_cell(t.bind(gi), t.bind(gh), t.bind(h)), 1); });
}

TEST_F(OpFixture, GruCellMatchesFormula) {
  Tape t(false);
  Matrix gi = random_matrix(6, 1, rng), gh = random_matrix(6, 1, rng), h = random_matrix(2, 1, rng);
  const Matrix out = ad::gru_cell(t.constant(gi), t.constant(gh), t.constant(h)).value();
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (int i = 0; i < 2; ++i) {
    const double r = sig(gi(i, 0) + gh(i, 0));
    const double z = sig(gi(2 + i, 0) + gh(2 + i, 0));
    const double n = std::tanh(gi(4 + i, 0) + r * gh(4 + i, 0));
    EXPECT_NEAR(out(i, 0), (1 - z) * n + z * h(i, 0), 1e-15);
  }
}

TEST_F(OpFixture, StopGradientAndFreezeBlockFlow) {
  Tape t;
  Var x = t.bind(a);
  Var l = ad::sum(ad::mul(ad::stop_gradient(x), x));
  t.backward(l);
  EXPECT_TRUE(t.grad(a).isApprox(a.value));

  Tape f;
  f.freeze(a);
  Var y = ad::sum(ad::square(f.bind(a)) + ad::square(f.bind(b)));
  f.backward(y);
  EXPECT_EQ(f.grad(a).norm(), 0.0);
  EXPECT_TRUE(f.grad(b).isApprox(2.0 * b.value));
}

TEST_F(OpFixture, RepeatedBindSharesNode) {
  Tape t;
  Var x1 = t.bind(a);
  Var x2 = t.bind(a);
  EXPECT_EQ(x1.id(), x2.id());
  t.backward(ad::sum(x1 + x2));
  EXPECT_TRUE(t.grad(a).isApprox(Matrix::Constant(3, 4, 2.0)));
}

TEST_F(OpFixture, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(ad::matmul(t.bind(a), t.bind(b)), std::invalid_argument);
  EXPECT_THROW(ad::add(t.bind(a), t.bind(c)), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter p{"p", Matrix::Constant(2, 2, 1.0)};
  Adam opt;
  Parameter *ps[] = {&p};
  const Matrix g[] = {Matrix::Constant(2, 2, 3.0)};
  opt.step(ps, g, 0.1);
  // Bias-corrected first step is lr * sign(g) up to epsilon.
  EXPECT_NEAR(p.value(0, 0), 0.9, 1e-8);
  EXPECT_EQ(opt.steps(), 1);
}

}  // namespace
}  // namespace assl
