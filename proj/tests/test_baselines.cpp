// SPDX-License-Identifier: Apache-2.0
#include "assl/baselines.hpp"
#include "assl/errors.hpp"
#include "assl/trainer.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace assl {
namespace {

using testing::random_frames;
using testing::random_matrix;

// ---------------------------------------------------------------------------
// Strategy table

TEST(Strategy, FlagsFollowTheName) {
  const StrategySpec sup = StrategySpec::make("supervised_only");
  EXPECT_FALSE(sup.uses_unlabeled());
  EXPECT_FALSE(sup.pseudo_labels);

  const StrategySpec s4l = StrategySpec::make("s4l_inpainting");
  const StrategySpec sup_inp = StrategySpec::make("sup_inp");
  EXPECT_TRUE(s4l.inpainting && !s4l.neighborhood && !s4l.adversarial && !s4l.vat && !s4l.entmin);
  EXPECT_EQ(s4l.inpainting, sup_inp.inpainting);
  EXPECT_EQ(s4l.neighborhood, sup_inp.neighborhood);
  EXPECT_EQ(s4l.adversarial, sup_inp.adversarial);

  const StrategySpec assl = StrategySpec::make("assl");
  EXPECT_TRUE(assl.inpainting && assl.neighborhood && assl.adversarial);
  EXPECT_FALSE(assl.vat || assl.entmin || assl.pseudo_labels);

  const StrategySpec ve = StrategySpec::make("vat_entmin");
  EXPECT_TRUE(ve.vat && ve.entmin && !ve.inpainting);
  EXPECT_TRUE(StrategySpec::make("pseudo_labels").pseudo_labels);

  EXPECT_EQ(ablation_variant_names().size(), 8u);
  for (const std::string &v : ablation_variant_names()) EXPECT_NO_THROW(StrategySpec::make(v));
}

TEST(Strategy, UnknownNamesAndHyperparametersAreRejected) {
  try {
    StrategySpec::make("mean_teacher");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError &e) {
    for (const std::string &n : strategy_names())
      EXPECT_NE(std::string(e.what()).find(n), std::string::npos) << n;
  }
  EXPECT_THROW(StrategySpec::make("vat", {{"vat_radius", 1.0}}), ConfigError);
  EXPECT_THROW(StrategySpec::make("vat", {{"vat_xi", 0.0}}), ConfigError);
  EXPECT_THROW(StrategySpec::make("vat", {{"vat_power_iters", 1.5}}), ConfigError);
  EXPECT_THROW(StrategySpec::make("pseudo_labels", {{"pseudo_threshold", 1.5}}), ConfigError);
}

TEST(Strategy, DefaultHyperparameters) {
  const StrategySpec s = StrategySpec::make("vat_entmin");
  EXPECT_EQ(s.hyper("vat_epsilon"), 2.0);
  EXPECT_EQ(s.hyper("vat_xi"), 1e-6);
  EXPECT_EQ(s.hyper("vat_power_iters"), 1.0);
  EXPECT_EQ(s.hyper("vat_weight"), 1.0);
  EXPECT_EQ(s.hyper("entmin_weight"), 1.0);
  EXPECT_EQ(s.hyper("pseudo_threshold"), 0.0);
  EXPECT_EQ(StrategySpec::make("vat", {{"vat_epsilon", 0.5}}).hyper("vat_epsilon"), 0.5);
}

// ---------------------------------------------------------------------------
// Pseudo-labels

TEST(PseudoLabels, ThresholdFilter) {
  Matrix p(3, 5);
  p << 0.7, 0.2, 0.4, 0.61, 0.3,  //
      0.2, 0.5, 0.4, 0.29, 0.3,   //
      0.1, 0.3, 0.2, 0.10, 0.4;
  EXPECT_EQ(select_pseudo_labels(p, 0.6), (std::vector<int>{0, -1, -1, 0, -1}));
  EXPECT_EQ(select_pseudo_labels(p, 0.0), (std::vector<int>{0, 1, 0, 0, 2}));
  EXPECT_EQ(select_pseudo_labels(p, 1.0), (std::vector<int>(5, -1)));
}

struct PseudoRound : ::testing::Test {
  ModelBundle m = testing::toy_bundle(41);
  DatasetSplit split;
  void SetUp() override {
    SyntheticConfig cfg;
    cfg.classes = 3;
    cfg.joints = 2;
    cfg.frames = 10;
    cfg.samples_per_class = 6;
    split = make_split(generate_synthetic(cfg), 0.34, 2);
  }
};

TEST_F(PseudoRound, ThresholdOneKeepsTheOriginalLabels) {
  const DatasetSplit out = pseudo_label_round(m, split, 1.0, 5, 3);
  ASSERT_EQ(out.labeled().size(), split.labeled().size());
  for (std::size_t i = 0; i < out.labeled().size(); ++i)
    EXPECT_EQ(out.labeled()[i].id, split.labeled()[i].id);
}

TEST_F(PseudoRound, ThresholdZeroLabelsEverySample) {
  const DatasetSplit out = pseudo_label_round(m, split, 0.0, 5, 3);
  EXPECT_EQ(out.labeled().size(), split.labeled().size() + split.unlabeled().size());
  EXPECT_EQ(out.unlabeled().size(), split.unlabeled().size());
  const std::vector<int> pred = predict_labels(m, split.unlabeled(), 5, 3);
  for (std::size_t i = 0; i < split.unlabeled().size(); ++i) {
    const SkeletonSequence &s = out.labeled()[split.labeled().size() + i];
    EXPECT_EQ(s.id, split.unlabeled()[i].id);
    EXPECT_EQ(s.label, pred[i]);
  }
}

// ---------------------------------------------------------------------------
// VAT

TEST(Vat, ZeroRadiusGivesZeroLoss) {
  const ModelBundle m = testing::toy_bundle(42);
  Rng rng(1);
  VatOptions opt;
  opt.epsilon = 0.0;
  EXPECT_EQ(vat_loss(m, random_frames(5, 2, rng), opt, 7), 0.0);
}

TEST(Vat, LossIsNonNegative) {
  const ModelBundle m = testing::toy_bundle(43);
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    VatOptions opt;
    opt.epsilon = 0.1 + 0.2 * i;
    EXPECT_GE(vat_loss(m, random_frames(5, 2, rng), opt, static_cast<std::uint64_t>(i)), 0.0);
  }
}

TEST(Vat, NormalizationAbsorbsTheStartingNorm) {
  Rng rng(3);
  const Matrix d = random_matrix(6, 10, rng);
  const Matrix a = normalize_per_sample(d, 5, 2), b = normalize_per_sample(37.5 * d, 5, 2);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-15);
  for (int s = 0; s < 2; ++s) {
    double n2 = 0.0;
    for (int t = 0; t < 5; ++t) n2 += a.col(t * 2 + s).squaredNorm();
    EXPECT_NEAR(n2, 1.0, 1e-12);
  }
}

TEST(Vat, PerturbationHasRadiusEpsilon) {
  const ModelBundle m = testing::toy_bundle(44);
  Rng rng(4);
  std::vector<Frames> xs = {random_frames(5, 2, rng), random_frames(5, 2, rng)};
  const Matrix x = pack_batch(std::span<const Frames>(xs));
  VatOptions opt;
  opt.epsilon = 0.7;
  Rng r1(9), r2(9);
  const Matrix r = vat_perturbation(m, x, 5, 2, opt, r1);
  EXPECT_EQ(r, vat_perturbation(m, x, 5, 2, opt, r2));
  for (int s = 0; s < 2; ++s) {
    double n2 = 0.0;
    for (int t = 0; t < 5; ++t) n2 += r.col(t * 2 + s).squaredNorm();
    EXPECT_NEAR(std::sqrt(n2), 0.7, 1e-12);
  }
}

TEST(Vat, PowerIterationFindsTheMostSensitiveDirection) {
  // Tiny model: J=1, T=2, C=2, so the input has 6 coordinates.
  const ModelBundle m = ModelBundle::create(ModelDims::scaled(1, 2, 2, 3, 3), 45);
  Rng rng(5);
  const Frames x = random_frames(2, 1, rng);
  const Frames *one[] = {&x};
  const Matrix packed = pack_batch(std::span<const Frames *const>(one));

  VatOptions opt;
  opt.epsilon = 1.0;
  opt.xi = 1e-6;
  opt.power_iters = 1;
  Rng prng(6);
  const Matrix r = vat_perturbation(m, packed, 2, 1, opt, prng);

  // Random search for the unit direction with the largest KL at a small radius.
  const double probe = 1e-3;
  double best_kl = -1.0;
  Matrix best;
  for (int i = 0; i < 1000; ++i) {
    const Matrix d = normalize_per_sample(random_matrix(3, 2, rng), 2, 1);
    Tape t(false);
    const double kl = vat_consistency(t, m, packed, probe * d, 2, 1).scalar();
    if (kl > best_kl) {
      best_kl = kl;
      best = d;
    }
  }
  const double cos = std::abs((r.array() * best.array()).sum()) / (r.norm() * best.norm());
  EXPECT_GT(cos, 0.9) << "best random KL " << best_kl;
}

// ---------------------------------------------------------------------------
// Entropy minimization

TEST(EntMin, ClosedFormsAndManualMean) {
  Vector onehot = Vector::Zero(4);
  onehot(2) = 1.0;
  const Vector uniform = Vector::Constant(4, 0.25);
  EXPECT_LT(entmin_loss(std::span(&onehot, 1)), 1e-7);
  EXPECT_NEAR(entmin_loss(std::span(&uniform, 1)), std::log(4.0), 1e-12);

  Vector a(3), b(3);
  a << 0.5, 0.25, 0.25;
  b << 0.9, 0.05, 0.05;
  const Vector batch[] = {a, b};
  auto h = [](const Vector &p) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s -= p(i) * std::log(p(i));
    return s;
  };
  EXPECT_NEAR(entmin_loss(batch), (h(a) + h(b)) / 2.0, 1e-12);

  Matrix cols(3, 2);
  cols << a, b;
  Tape t(false);
  EXPECT_NEAR(entmin_loss(t.constant(cols)).scalar(), (h(a) + h(b)) / 2.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Shared trainer path

struct SharedPath : ::testing::Test {
  DatasetSplit split;
  ModelBundle m;
  FeatureBank bank;
  StepInput input;
  TrainConfig cfg;

  void SetUp() override {
    SyntheticConfig sc;
    sc.classes = 3;
    sc.joints = 2;
    sc.frames = 12;
    sc.samples_per_class = 10;
    split = make_split(generate_synthetic(sc), 0.3, 4, 0.2);
    cfg.T = 5;
    cfg.K = 3;
    cfg.encoder_hidden = 4;
    cfg.decoder_hidden = 4;
    cfg.batch_labeled = 4;
    cfg.batch_unlabeled = 4;
    m = ModelBundle::create(cfg.model_dims(2, 3), 5);
    bank = rebuild_bank(m, split, cfg.T, cfg.feature_seed());
    input = assemble_batch(split, make_batches(split, cfg, 0).front(), cfg.T, 11);
  }

  LossReport objective(const std::string &strategy, double lambda1 = 1.0) {
    TrainConfig c = cfg;
    c.strategy = StrategySpec::make(strategy);
    c.lambda1 = lambda1;
    Rng rng(17);
    return batch_objective(m, input, &bank, c, rng);
  }
};

TEST_F(SharedPath, SupervisedLossIsBitwiseEqualAcrossStrategies) {
  const double ref = objective("supervised_only").l_sup;
  EXPECT_GT(ref, 0.0);
  for (const std::string &s : strategy_names()) EXPECT_EQ(objective(s).l_sup, ref) << s;
}

TEST_F(SharedPath, S4lRecomposesFromTheLossModule) {
  const LossReport r = objective("s4l_inpainting");
  EXPECT_EQ(r.l_kl, 0.0);
  EXPECT_EQ(r.l_ce_center, 0.0);
  EXPECT_EQ(r.l_adv, 0.0);
  EXPECT_GT(r.l_inp, 0.0);
  const LossReport manual = s4l_inpainting_objective(r.l_sup, r.l_inp, 1.0, 0.1);
  EXPECT_EQ(r.total, manual.total);
  EXPECT_EQ(r.total, r.l_sup + 1.0 * r.l_inp);

  // Same code path as the Sup.+Inp. ablation variant.
  const LossReport v = objective("sup_inp");
  EXPECT_EQ(v.total, r.total);
  EXPECT_EQ(v.l_inp, r.l_inp);

  EXPECT_EQ(objective("s4l_inpainting", 0.0).total, objective("supervised_only").total);
}

TEST_F(SharedPath, VatAndEntMinReportTheirOwnFields) {
  const LossReport v = objective("vat_entmin");
  EXPECT_GT(v.l_vat, 0.0);
  EXPECT_GT(v.l_entmin, 0.0);
  EXPECT_EQ(v.l_inp, 0.0);
  EXPECT_EQ(v.total, v.l_sup + v.l_vat + v.l_entmin);
}

TEST_F(SharedPath, PseudoLabelExperimentRuns) {
  TrainConfig c = cfg;
  c.strategy = StrategySpec::make("pseudo_labels");
  c.epochs = 1;
  const ExperimentResult r = run_experiment(c, split);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].loss.l_inp, 0.0);
  EXPECT_GE(r.final_accuracy, 0.0);
}

}  // namespace
}  // namespace assl
