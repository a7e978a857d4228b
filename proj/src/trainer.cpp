// SPDX-License-Identifier: Apache-2.0
#include "assl/trainer.hpp"

#include "assl/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <tuple>

namespace assl {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t salted(std::uint64_t seed, std::string_view salt, std::uint64_t index = 0) {
  return mix_seed(mix_seed(seed, stable_hash(salt)), index);
}

std::vector<const Parameter *> disc_params(const ModelBundle &m) {
  std::vector<const Parameter *> out;
  for (const Linear &l : m.discriminator.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

void ensure_finite(double v, const char *term) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term ") + term);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string &what) { throw ConfigError(what); };
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) fail("lambda1 and lambda2 must be >= 0");
  if (K < 1) fail("K must be >= 1");
  if (T < 2) fail("T must be >= 2");
  if (batch_labeled < 1 || batch_unlabeled < 1) fail("batch sizes must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must lie in (0, 1]");
  if (lr_decay_every < 1) fail("lr_decay_every must be >= 1");
  if (!(mask_fraction > 0.0 && mask_fraction <= 1.0)) fail("mask_fraction must lie in (0, 1]");
  if (disc_steps < 1) fail("disc_steps must be >= 1");
  if (encoder_hidden < 1 || decoder_hidden < 1) fail("hidden sizes must be >= 1");
  if (!(labels_fraction > 0.0 && labels_fraction <= 1.0))
    fail("labels_fraction must lie in (0, 1]");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail("test_fraction must lie in [0, 1)");
}

double TrainConfig::learning_rate(int epoch) const {
  return lr * std::pow(lr_decay, epoch / lr_decay_every);
}

ModelDims TrainConfig::model_dims(int joints, int classes) const {
  return ModelDims::scaled(joints, classes, T, encoder_hidden, decoder_hidden);
}

std::uint64_t TrainConfig::split_seed() const { return salted(seed, "split"); }
std::uint64_t TrainConfig::init_seed() const { return salted(seed, "init"); }
std::uint64_t TrainConfig::feature_seed() const { return salted(seed, "features"); }

// ---------------------------------------------------------------------------
// Metrics files

std::string metrics_csv_header() {
  return "epoch,l_sup,l_kl,l_ce_center,l_inp,l_unlabeled,l_adv,l_vat,l_entmin,total,lambda1,"
         "lambda2,train_disc_accuracy,test_accuracy,neighbor_quality_ratio,lr";
}

std::string metrics_csv_line(const MetricsRow &r) {
  const LossReport &l = r.loss;
  std::string s = std::to_string(r.epoch);
  for (double v : {l.l_sup, l.l_kl, l.l_ce_center, l.l_inp, l.l_unlabeled, l.l_adv, l.l_vat,
                   l.l_entmin, l.total, l.lambda1, l.lambda2, r.train_disc_accuracy,
                   r.test_accuracy, r.neighbor_quality_ratio, r.lr})
    s += "," + fmt(v);
  return s;
}

void write_metrics_csv(const fs::path &path, std::span<const MetricsRow> rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << metrics_csv_header() << '\n';
  for (const MetricsRow &r : rows) out << metrics_csv_line(r) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header())
    throw ParseError(1, "unexpected metrics header in '" + path.string() + "'");
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 16) throw ParseError(lineno, "expected 16 metrics columns");
    try {
      MetricsRow r;
      r.epoch = std::stoi(cells[0]);
      double *fields[] = {&r.loss.l_sup,       &r.loss.l_kl,        &r.loss.l_ce_center,
                          &r.loss.l_inp,       &r.loss.l_unlabeled, &r.loss.l_adv,
                          &r.loss.l_vat,       &r.loss.l_entmin,    &r.loss.total,
                          &r.loss.lambda1,     &r.loss.lambda2,     &r.train_disc_accuracy,
                          &r.test_accuracy,    &r.neighbor_quality_ratio, &r.lr};
      for (std::size_t i = 0; i < 15; ++i) *fields[i] = std::stod(cells[i + 1]);
      rows.push_back(r);
    } catch (const std::logic_error &) {
      throw ParseError(lineno, "malformed number in metrics row");
    }
  }
  return rows;
}

void write_timing_csv(const fs::path &path, std::span<const MetricsRow> rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "epoch,wall_seconds\n";
  for (const MetricsRow &r : rows) out << r.epoch << ',' << fmt(r.wall_seconds) << '\n';
}

// ---------------------------------------------------------------------------
// Batches

std::vector<Batch> make_batches(const DatasetSplit &split, const TrainConfig &cfg, int epoch) {
  const int L = static_cast<int>(split.labeled().size());
  const int U = static_cast<int>(split.unlabeled().size());
  if (L == 0) throw ConfigError("labeled pool is empty");
  if (U == 0) throw ConfigError("unlabeled pool is empty");

  Rng rng(salted(cfg.seed, "batches", static_cast<std::uint64_t>(epoch)));
  std::vector<int> perm_u(U), perm_l(L);
  std::iota(perm_u.begin(), perm_u.end(), 0);
  std::iota(perm_l.begin(), perm_l.end(), 0);
  std::shuffle(perm_u.begin(), perm_u.end(), rng);
  std::shuffle(perm_l.begin(), perm_l.end(), rng);

  const int bu = cfg.batch_unlabeled, bl = cfg.batch_labeled;
  std::vector<Batch> out;
  std::size_t lpos = 0;
  for (int start = 0; start < U; start += bu) {
    const int ucount = std::min(bu, U - start);
    const int lcount =
        ucount == bu ? bl
                     : std::max(1, static_cast<int>(std::lround(double(ucount) * bl / bu)));
    Batch b;
    b.unlabeled.assign(perm_u.begin() + start, perm_u.begin() + start + ucount);
    for (int j = 0; j < lcount; ++j) b.labeled.push_back(perm_l[lpos++ % perm_l.size()]);
    out.push_back(std::move(b));
  }
  return out;
}

StepInput assemble_batch(const DatasetSplit &split, const Batch &batch, int frames,
                         std::uint64_t frame_seed) {
  StepInput in;
  for (int i : batch.labeled) {
    const SkeletonSequence &s = split.labeled().at(static_cast<std::size_t>(i));
    in.labeled_ids.push_back(s.id);
    in.labeled.push_back(prepare_input(s, frames, frame_seed));
    in.labels.push_back(s.label.value());
  }
  for (int i : batch.unlabeled) {
    const SkeletonSequence &s = split.unlabeled().at(static_cast<std::size_t>(i));
    in.unlabeled_ids.push_back(s.id);
    in.unlabeled.push_back(prepare_input(s, frames, frame_seed));
  }
  return in;
}

// ---------------------------------------------------------------------------
// Steps

namespace {

struct Terms {
  Var l_sup, l_inp, l_kl, l_ce, l_adv, l_vat, l_ent;
  Var hb_l, hb_u;
};

// Bank neighbors of every anchor column, stacked d x (B*K).
Matrix gather_neighbors(const FeatureBank &bank, std::span<const std::string> ids,
                        const Matrix &anchors, int k, std::vector<NeighborSet> *sets) {
  Matrix out(anchors.rows(), anchors.cols() * k);
  for (Eigen::Index b = 0; b < anchors.cols(); ++b) {
    NeighborSet ns = knn_query(bank, ids[b], anchors.col(b), k);
    for (int j = 0; j < k; ++j) out.col(b * k + j) = bank.unlabeled_features().col(ns.indices[j]);
    if (sets) sets->push_back(std::move(ns));
  }
  return out;
}

// Every term except the adversarial one, which needs the discriminator
// sub-step to run first.
Terms forward_terms(Tape &tape, const ModelBundle &m, const StepInput &in, const FeatureBank *bank,
                    const TrainConfig &cfg, Rng &rng) {
  const StrategySpec &s = cfg.strategy;
  const int T = cfg.T;
  const int L = static_cast<int>(in.labeled.size());
  const int U = static_cast<int>(in.unlabeled.size());
  if (L == 0) throw ContractError("train_step: empty labeled batch");

  Terms f;
  // The labeled batch always gets its own pass so that the supervised term
  // does not depend on which other terms are active.
  f.hb_l = translate(tape, m,
                     encode(tape, m, tape.constant(pack_batch(std::span<const Frames>(in.labeled))),
                            T, L));
  f.l_sup = cross_entropy(classify(tape, m, f.hb_l), in.labels);
  if (!s.uses_unlabeled()) return f;
  if (U == 0) throw ContractError("train_step: empty unlabeled batch");

  const Matrix xu = pack_batch(std::span<const Frames>(in.unlabeled));
  const bool need_clean = s.neighborhood || s.adversarial || s.entmin;
  if (s.inpainting) {
    std::vector<Frames> masked;
    masked.reserve(in.unlabeled.size());
    for (const Frames &x : in.unlabeled)
      masked.push_back(apply_mask(x, random_mask(T, cfg.mask_fraction, rng)));
    const Matrix xm = pack_batch(std::span<const Frames>(masked));
    Var h_m;
    if (need_clean) {
      std::vector<const Frames *> both;
      for (const Frames &x : masked) both.push_back(&x);
      for (const Frames &x : in.unlabeled) both.push_back(&x);
      Var h = encode(tape, m, tape.constant(pack_batch(std::span<const Frames *const>(both))), T,
                     2 * U);
      h_m = ad::slice_cols(h, 0, U);
      f.hb_u = translate(tape, m, ad::slice_cols(h, U, U));
    } else {
      h_m = encode(tape, m, tape.constant(xm), T, U);
    }
    Var recon = decode(tape, m, h_m, tape.constant(xm), T, U);
    f.l_inp = inpainting_loss(recon, tape.constant(xu));
  } else if (need_clean) {
    f.hb_u = translate(tape, m, encode(tape, m, tape.constant(xu), T, U));
  }

  Var p_u;
  if (need_clean) p_u = classify(tape, m, f.hb_u);

  if (s.neighborhood) {
    if (!bank) throw ContractError("train_step: neighborhood terms need a feature bank");
    const int K = cfg.K;
    std::vector<NeighborSet> sets;
    const Matrix nu = gather_neighbors(*bank, in.unlabeled_ids, f.hb_u.value(), K, &sets);
    Var w_u = attention_weights(tape, m, f.hb_u, nu, K);
    Var c_u = local_center(w_u, tape.constant(nu), K);
    std::vector<Eigen::Index> owner;
    std::vector<int> cols;
    for (std::size_t b = 0; b < sets.size(); ++b)
      for (int idx : select_positive(sets[b], *bank).indices) {
        owner.push_back(static_cast<Eigen::Index>(b));
        cols.push_back(idx);
      }
    Var p_pos;
    if (!cols.empty()) {
      Matrix pf(nu.rows(), static_cast<Eigen::Index>(cols.size()));
      for (std::size_t i = 0; i < cols.size(); ++i)
        pf.col(static_cast<Eigen::Index>(i)) = bank->unlabeled_features().col(cols[i]);
      p_pos = classify(tape, m, tape.constant(pf));
    }
    f.l_kl = neighborhood_kl_loss(classify(tape, m, c_u), p_u, p_pos, owner,
                                  cfg.kl_target_stop_gradient);

    const Matrix nl = gather_neighbors(*bank, in.labeled_ids, f.hb_l.value(), K, nullptr);
    Var w_l = attention_weights(tape, m, f.hb_l, nl, K);
    Var c_l = local_center(w_l, tape.constant(nl), K);
    f.l_ce = cross_entropy(classify(tape, m, c_l), in.labels);
  }

  if (s.entmin) f.l_ent = ad::scale(entmin_loss(p_u), s.hyper("entmin_weight"));
  if (s.vat) {
    VatOptions opt;
    opt.epsilon = s.hyper("vat_epsilon");
    opt.xi = s.hyper("vat_xi");
    opt.power_iters = static_cast<int>(s.hyper("vat_power_iters"));
    f.l_vat = ad::scale(vat_loss(tape, m, xu, T, U, opt, rng), s.hyper("vat_weight"));
  }
  return f;
}

Var adversarial_term(Tape &tape, const ModelBundle &m, const Terms &f) {
  return adversarial_loss(discriminate(tape, m, f.hb_l), discriminate(tape, m, f.hb_u));
}

// Weighted sum on the tape plus the matching report.
std::pair<Var, LossReport> combine(const Terms &f, const TrainConfig &cfg) {
  LossTerms t;
  auto val = [](Var v) { return v.valid() ? v.scalar() : 0.0; };
  t.l_sup = val(f.l_sup);
  t.l_kl = val(f.l_kl);
  t.l_ce_center = val(f.l_ce);
  t.l_inp = val(f.l_inp);
  t.l_adv = val(f.l_adv);
  t.l_vat = val(f.l_vat);
  t.l_entmin = val(f.l_ent);
  ensure_finite(t.l_sup, "l_sup");
  ensure_finite(t.l_kl, "l_kl");
  ensure_finite(t.l_ce_center, "l_ce_center");
  ensure_finite(t.l_inp, "l_inp");
  ensure_finite(t.l_adv, "l_adv");
  ensure_finite(t.l_vat, "l_vat");
  ensure_finite(t.l_entmin, "l_entmin");

  Var total = f.l_sup;
  Var unl;
  for (Var v : {f.l_kl, f.l_ce, f.l_inp})
    if (v.valid()) unl = unl.valid() ? unl + v : v;
  if (unl.valid()) total = total + ad::scale(unl, cfg.lambda1);
  if (f.l_adv.valid()) total = total + ad::scale(f.l_adv, cfg.lambda2);
  if (f.l_vat.valid()) total = total + f.l_vat;
  if (f.l_ent.valid()) total = total + f.l_ent;
  return {total, total_objective(t, cfg.lambda1, cfg.lambda2)};
}

}  // namespace

DiscStepResult discriminator_step(ModelBundle &m, Adam &opt, const Matrix &labeled_features,
                                  const Matrix &unlabeled_features, double lr) {
  Tape tape;
  Var sl = discriminate(tape, m, tape.constant(labeled_features));
  Var su = discriminate(tape, m, tape.constant(unlabeled_features));
  Var adv = adversarial_loss(sl, su);

  DiscStepResult r;
  r.bce_before = -adv.scalar();
  ensure_finite(r.bce_before, "discriminator l_adv");
  const double correct = static_cast<double>((sl.value().array() > 0.5).count() +
                                             (su.value().array() < 0.5).count());
  r.accuracy = correct / static_cast<double>(sl.cols() + su.cols());

  tape.backward(-adv);
  std::vector<Parameter *> params = m.discriminator_parameters();
  const std::vector<Matrix> grads = tape.gradients(as_const(params));
  opt.step(params, grads, lr);
  return r;
}

StepResult train_step(TrainState &state, const StepInput &batch, const FeatureBank *bank,
                      const TrainConfig &cfg, double lr, Rng &rng) {
  ModelBundle &m = state.bundle;
  Tape tape;
  tape.freeze(disc_params(m));
  Terms f = forward_terms(tape, m, batch, bank, cfg, rng);

  StepResult out;
  if (cfg.strategy.adversarial) {
    for (int i = 0; i < cfg.disc_steps; ++i) {
      DiscStepResult d =
          discriminator_step(m, state.disc_opt, f.hb_l.value(), f.hb_u.value(), lr);
      if (i == 0) out.disc_accuracy = d.accuracy;
    }
    f.l_adv = adversarial_term(tape, m, f);
  }
  auto [total, report] = combine(f, cfg);
  out.report = report;

  tape.backward(total);
  std::vector<Parameter *> params = m.model_parameters();
  const std::vector<Matrix> grads = tape.gradients(as_const(params));
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].allFinite()) throw NumericError("non-finite gradient for " + params[i]->name);
  state.model_opt.step(params, grads, lr);
  return out;
}

LossReport batch_objective(const ModelBundle &m, const StepInput &batch, const FeatureBank *bank,
                           const TrainConfig &cfg, Rng &rng) {
  Tape tape(false);
  Terms f = forward_terms(tape, m, batch, bank, cfg, rng);
  if (cfg.strategy.adversarial) f.l_adv = adversarial_term(tape, m, f);
  return combine(f, cfg).second;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<int> predict_labels(const ModelBundle &m, std::span<const SkeletonSequence> seqs,
                                int frames, std::uint64_t seed) {
  const Matrix feats = embed_sequences(m, seqs, frames, seed);
  Tape tape(false);
  const Matrix probs = classify(tape, m, tape.constant(feats)).value();
  std::vector<int> out(seqs.size());
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.rows(); ++k)
      if (probs(k, c) > probs(best, c)) best = k;
    out[static_cast<std::size_t>(c)] = static_cast<int>(best);
  }
  return out;
}

double evaluate(const ModelBundle &m, std::span<const SkeletonSequence> test, int frames,
                std::uint64_t seed) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  const std::vector<int> pred = predict_labels(m, test, frames, seed);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (pred[i] == test[i].label.value()) ++correct;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

struct Trained {
  TrainState state;
  std::vector<MetricsRow> rows;
};

// The shared loop. `bank_split` is the split the feature bank covers; it
// differs from `train_split` only after pseudo-labelling.
ExperimentResult train_loop(const TrainConfig &cfg, const DatasetSplit &train_split,
                            const DatasetSplit &bank_split, const ExperimentOptions &options,
                            bool emit) {
  const auto t0 = std::chrono::steady_clock::now();
  const int joints = train_split.labeled().at(0).frames.joints();
  const ModelDims dims = cfg.model_dims(joints, train_split.classes());
  TrainState state{ModelBundle::create(dims, cfg.init_seed()), Adam{}, Adam{}};

  const bool write = emit && options.out_dir.has_value();
  if (write) fs::create_directories(*options.out_dir);
  const fs::path ckpt = write ? *options.out_dir / "checkpoint.bin" : fs::path{};

  ExperimentResult res;
  res.best_accuracy = evaluate(state.bundle, train_split.test(), cfg.T, cfg.feature_seed());
  res.best_epoch = -1;
  res.final_accuracy = res.best_accuracy;
  if (write) save_checkpoint(state.bundle, ckpt);

  const bool need_bank = emit || cfg.strategy.neighborhood;
  FeatureBank bank;
  if (need_bank) bank = rebuild_bank(state.bundle, bank_split, cfg.T, cfg.feature_seed(), 0);

  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.learning_rate(e);
    const std::vector<Batch> batches = make_batches(train_split, cfg, e);
    const std::uint64_t frame_seed = salted(cfg.seed, "frames", static_cast<std::uint64_t>(e));

    LossTerms sum;
    double disc_acc = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      const StepInput in = assemble_batch(train_split, batches[i], cfg.T, frame_seed);
      Rng rng(salted(cfg.seed, "step", static_cast<std::uint64_t>(e) * 1000003u + i));
      const StepResult r = train_step(state, in, need_bank ? &bank : nullptr, cfg, lr, rng);
      sum.l_sup += r.report.l_sup;
      sum.l_kl += r.report.l_kl;
      sum.l_ce_center += r.report.l_ce_center;
      sum.l_inp += r.report.l_inp;
      sum.l_adv += r.report.l_adv;
      sum.l_vat += r.report.l_vat;
      sum.l_entmin += r.report.l_entmin;
      disc_acc += r.disc_accuracy;
    }
    const double n = static_cast<double>(batches.size());
    LossTerms mean{sum.l_sup / n,  sum.l_kl / n,  sum.l_ce_center / n, sum.l_inp / n,
                   sum.l_adv / n,  sum.l_vat / n, sum.l_entmin / n};

    if (!emit) continue;
    bank = rebuild_bank(state.bundle, bank_split, cfg.T, cfg.feature_seed(), e + 1);
    const std::vector<NeighborSet> sets = bank_neighborhoods(bank, cfg.K);
    if (options.dump_neighbors && options.out_dir) {
      fs::create_directories(*options.out_dir);
      write_neighbor_dump(*options.out_dir / ("neighbors_epoch" + std::to_string(e) + ".csv"),
                          sets, bank);
    }

    MetricsRow row;
    row.epoch = e;
    row.loss = total_objective(mean, cfg.lambda1, cfg.lambda2);
    row.train_disc_accuracy = cfg.strategy.adversarial ? disc_acc / n : 0.0;
    row.test_accuracy = evaluate(state.bundle, train_split.test(), cfg.T, cfg.feature_seed());
    row.neighbor_quality_ratio = neighbor_quality_ratio(sets, bank_split.evaluation_labels());
    row.lr = lr;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.rows.push_back(row);
    res.final_accuracy = row.test_accuracy;
    if (row.test_accuracy > res.best_accuracy) {
      res.best_accuracy = row.test_accuracy;
      res.best_epoch = e;
      if (write) save_checkpoint(state.bundle, ckpt);
    }
    if (options.on_epoch) options.on_epoch(row);
  }
  if (!emit) res.final_accuracy = 0.0;
  res.bundle = std::move(state.bundle);
  return res;
}

void check_split(const TrainConfig &cfg, const DatasetSplit &split) {
  if (split.labeled().empty()) throw ConfigError("labeled pool is empty");
  if (split.test().empty()) throw ConfigError("test set is empty");
  if (split.classes() < 1) throw ConfigError("split has no classes");
  const int eligible = static_cast<int>(split.unlabeled().size()) - 1;
  if (cfg.K > eligible)
    throw ConfigError("K=" + std::to_string(cfg.K) + " exceeds the unlabeled pool (" +
                      std::to_string(eligible) + " eligible neighbors)");
}

}  // namespace

ExperimentResult run_experiment(const TrainConfig &cfg, const DatasetSplit &split,
                                const ExperimentOptions &options) {
  cfg.validate();
  check_split(cfg, split);

  ExperimentResult res;
  if (cfg.strategy.pseudo_labels) {
    TrainConfig stage = cfg;
    stage.strategy = StrategySpec::make("supervised_only", cfg.strategy.hyperparameters);
    DatasetSplit current = split;
    const int rounds = static_cast<int>(cfg.strategy.hyper("pseudo_rounds"));
    for (int r = 0; r < rounds; ++r) {
      ExperimentResult pre = train_loop(stage, current, split, options, false);
      current = pseudo_label_round(pre.bundle, split, cfg.strategy.hyper("pseudo_threshold"),
                                   cfg.T, cfg.feature_seed());
    }
    TrainConfig final_cfg = cfg;
    final_cfg.strategy = stage.strategy;
    final_cfg.strategy.name = cfg.strategy.name;
    res = train_loop(final_cfg, current, split, options, true);
  } else {
    res = train_loop(cfg, split, split, options, true);
  }

  if (options.out_dir) {
    write_metrics_csv(*options.out_dir / "metrics.csv", res.rows);
    write_timing_csv(*options.out_dir / "timing.csv", res.rows);
    write_summary_json(*options.out_dir / "summary.json", summarize_run(cfg, res));
  }
  return res;
}

ExperimentResult run_seeded(const TrainConfig &cfg, std::span<const SkeletonSequence> data,
                            const ExperimentOptions &options) {
  cfg.validate();
  const DatasetSplit split =
      make_split(data, cfg.labels_fraction, cfg.split_seed(), cfg.test_fraction);
  return run_experiment(cfg, split, options);
}

RunSummary summarize_run(const TrainConfig &cfg, const ExperimentResult &r) {
  RunSummary s;
  s.strategy = cfg.strategy.name;
  s.fraction = cfg.labels_fraction;
  s.seed = cfg.seed;
  s.K = cfg.K;
  s.epochs = cfg.epochs;
  s.best_accuracy = r.best_accuracy;
  s.best_epoch = r.best_epoch;
  s.final_accuracy = r.final_accuracy;
  if (!r.rows.empty()) {
    s.first_nqr = r.rows.front().neighbor_quality_ratio;
    s.final_nqr = r.rows.back().neighbor_quality_ratio;
  }
  return s;
}

void write_summary_json(const fs::path &path, const RunSummary &s) {
  nlohmann::ordered_json j;
  j["strategy"] = s.strategy;
  j["fraction"] = s.fraction;
  j["seed"] = s.seed;
  j["K"] = s.K;
  j["epochs"] = s.epochs;
  j["best_accuracy"] = s.best_accuracy;
  j["best_epoch"] = s.best_epoch;
  j["final_accuracy"] = s.final_accuracy;
  j["first_neighbor_quality_ratio"] = s.first_nqr;
  j["final_neighbor_quality_ratio"] = s.final_nqr;
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

RunSummary read_summary_json(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    RunSummary s;
    s.strategy = j.at("strategy").get<std::string>();
    s.fraction = j.at("fraction").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.K = j.at("K").get<int>();
    s.epochs = j.at("epochs").get<int>();
    s.best_accuracy = j.at("best_accuracy").get<double>();
    s.best_epoch = j.at("best_epoch").get<int>();
    s.final_accuracy = j.at("final_accuracy").get<double>();
    s.first_nqr = j.at("first_neighbor_quality_ratio").get<double>();
    s.final_nqr = j.at("final_neighbor_quality_ratio").get<double>();
    return s;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(0, std::string("summary '") + path.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Ablations

AblationRow summarize_accuracies(const std::string &variant, std::span<const double> accs) {
  AblationRow row;
  row.variant = variant;
  row.seeds = static_cast<int>(accs.size());
  row.per_seed.assign(accs.begin(), accs.end());
  if (accs.empty()) return row;
  double sum = 0.0;
  for (double a : accs) sum += a;
  row.mean_acc = sum / static_cast<double>(accs.size());
  if (accs.size() > 1) {
    double ss = 0.0;
    for (double a : accs) ss += (a - row.mean_acc) * (a - row.mean_acc);
    row.std_acc = std::sqrt(ss / static_cast<double>(accs.size() - 1));
  }
  return row;
}

namespace {

struct Job {
  std::string variant;
  int K;
  std::uint64_t seed;
};

struct JobResult {
  RunSummary summary;
  std::vector<double> nqr;
};

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads && static_cast<std::size_t>(t) < n; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (std::thread &t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

AblationReport run_ablation(const TrainConfig &base, std::span<const SkeletonSequence> data,
                            const AblationOptions &options) {
  base.validate();
  for (const std::string &v : options.variants) StrategySpec::make(v);  // validates names
  if (options.seeds.empty()) throw ConfigError("ablation needs at least one seed");

  std::vector<Job> jobs;
  std::map<std::tuple<std::string, int, std::uint64_t>, std::size_t> index;
  auto add = [&](const std::string &v, int k, std::uint64_t s) {
    auto key = std::make_tuple(v, k, s);
    if (index.contains(key)) return;
    index[key] = jobs.size();
    jobs.push_back({v, k, s});
  };
  for (const std::string &v : options.variants)
    for (std::uint64_t s : options.seeds) add(v, base.K, s);
  const std::size_t k_seeds = std::min<std::size_t>(
      options.seeds.size(), static_cast<std::size_t>(std::max(options.k_seeds, 0)));
  for (int k : options.k_values)
    for (std::size_t i = 0; i < k_seeds; ++i) add("assl", k, options.seeds[i]);

  std::vector<JobResult> results(jobs.size());
  parallel_for(jobs.size(), options.threads, [&](std::size_t i) {
    const Job &job = jobs[i];
    TrainConfig cfg = base;
    cfg.strategy = StrategySpec::make(job.variant, base.strategy.hyperparameters);
    cfg.K = job.K;
    cfg.seed = job.seed;
    ExperimentOptions eo;
    if (options.out_dir)
      eo.out_dir = *options.out_dir / "runs" /
                   (job.variant + "_K" + std::to_string(job.K) + "_seed" +
                    std::to_string(job.seed));
    const ExperimentResult r = run_seeded(cfg, data, eo);
    results[i].summary = summarize_run(cfg, r);
    for (const MetricsRow &row : r.rows) results[i].nqr.push_back(row.neighbor_quality_ratio);
  });

  AblationReport report;
  for (const JobResult &r : results) report.runs.push_back(r.summary);
  for (const std::string &v : options.variants) {
    std::vector<double> accs;
    for (std::uint64_t s : options.seeds)
      accs.push_back(results[index.at({v, base.K, s})].summary.final_accuracy);
    report.table.push_back(summarize_accuracies(v, accs));
  }
  for (int k : options.k_values) {
    std::vector<double> accs;
    for (std::size_t i = 0; i < k_seeds; ++i)
      accs.push_back(results[index.at({"assl", k, options.seeds[i]})].summary.final_accuracy);
    const AblationRow row = summarize_accuracies("assl", accs);
    report.k_curve.push_back({k, row.mean_acc, row.std_acc, row.per_seed});
  }
  // Neighbor quality over epochs, averaged over the assl runs at the base K.
  std::vector<const JobResult *> assl_runs;
  for (std::uint64_t s : options.seeds)
    if (auto it = index.find({"assl", base.K, s}); it != index.end())
      assl_runs.push_back(&results[it->second]);
  if (!assl_runs.empty()) {
    report.nqr_curve.assign(assl_runs.front()->nqr.size(), 0.0);
    for (const JobResult *r : assl_runs)
      for (std::size_t e = 0; e < report.nqr_curve.size(); ++e) report.nqr_curve[e] += r->nqr[e];
    for (double &v : report.nqr_curve) v /= static_cast<double>(assl_runs.size());
  }
  return report;
}

void write_ablation_csv(const fs::path &path, std::span<const AblationRow> rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "variant,seeds,mean_acc,std_acc\n";
  for (const AblationRow &r : rows)
    out << r.variant << ',' << r.seeds << ',' << fmt(r.mean_acc) << ',' << fmt(r.std_acc) << '\n';
}

void write_k_sweep_csv(const fs::path &path, std::span<const KSweepPoint> points) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "K,seeds,mean_acc,std_acc\n";
  for (const KSweepPoint &p : points)
    out << p.K << ',' << p.per_seed.size() << ',' << fmt(p.mean_acc) << ',' << fmt(p.std_acc)
        << '\n';
}

// ---------------------------------------------------------------------------
// Export

void export_embeddings(const ModelBundle &m, const DatasetSplit &split, int frames,
                       std::uint64_t seed, const fs::path &path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "id\tsplit\ttrue_label";
  for (int i = 0; i < m.dims.feature_width(); ++i) out << "\tf" << i;
  out << '\n';
  auto dump = [&](std::span<const SkeletonSequence> pool, const char *name, bool hidden) {
    const Matrix feats = embed_sequences(m, pool, frames, seed);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const int label =
          hidden ? split.evaluation_labels().at(pool[i].id) : pool[i].label.value();
      out << pool[i].id << '\t' << name << '\t' << label;
      for (Eigen::Index r = 0; r < feats.rows(); ++r)
        out << '\t' << fmt(feats(r, static_cast<Eigen::Index>(i)));
      out << '\n';
    }
  };
  dump(split.labeled(), "labeled", false);
  dump(split.unlabeled(), "unlabeled", true);
  dump(split.test(), "test", false);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace assl
