// SPDX-License-Identifier: Apache-2.0
#include "assl/baselines.hpp"

#include "assl/errors.hpp"

#include <algorithm>
#include <cmath>

namespace assl {

namespace {

struct Flags {
  bool inp, nei, adv, vat, ent, pseudo;
};

const std::map<std::string, Flags> &strategy_table() {
  static const std::map<std::string, Flags> table = {
      {"supervised_only", {false, false, false, false, false, false}},
      {"pseudo_labels", {false, false, false, false, false, true}},
      {"vat", {false, false, false, true, false, false}},
      {"vat_entmin", {false, false, false, true, true, false}},
      {"s4l_inpainting", {true, false, false, false, false, false}},
      {"sup", {false, false, false, false, false, false}},
      {"sup_inp", {true, false, false, false, false, false}},
      {"sup_nei", {false, true, false, false, false, false}},
      {"sup_inp_nei", {true, true, false, false, false, false}},
      {"sup_adv", {false, false, true, false, false, false}},
      {"sup_inp_adv", {true, false, true, false, false, false}},
      {"sup_nei_adv", {false, true, true, false, false, false}},
      {"assl", {true, true, true, false, false, false}},
  };
  return table;
}

std::string joined(const std::vector<std::string> &names) {
  std::string out;
  for (const std::string &n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

bool is_integer(double v) { return std::floor(v) == v; }

}  // namespace

const std::vector<std::string> &strategy_names() {
  static const std::vector<std::string> names = {
      "supervised_only", "pseudo_labels", "vat",     "vat_entmin",  "s4l_inpainting",
      "sup",             "sup_inp",       "sup_nei", "sup_inp_nei", "sup_adv",
      "sup_inp_adv",     "sup_nei_adv",   "assl"};
  return names;
}

const std::vector<std::string> &ablation_variant_names() {
  static const std::vector<std::string> names = {"sup",     "sup_inp",     "sup_nei",     "sup_inp_nei",
                                                 "sup_adv", "sup_inp_adv", "sup_nei_adv", "assl"};
  return names;
}

const std::map<std::string, double> &default_hyperparameters() {
  static const std::map<std::string, double> defaults = {
      {"vat_epsilon", 2.0},    {"vat_xi", 1e-6},         {"vat_power_iters", 1.0},
      {"vat_weight", 1.0},     {"entmin_weight", 1.0},   {"pseudo_threshold", 0.0},
      {"pseudo_rounds", 1.0},
  };
  return defaults;
}

StrategySpec StrategySpec::make(const std::string &name,
                                const std::map<std::string, double> &overrides) {
  auto it = strategy_table().find(name);
  if (it == strategy_table().end())
    throw ConfigError("unknown strategy '" + name + "'; valid names: " + joined(strategy_names()));
  StrategySpec s;
  s.name = name;
  s.inpainting = it->second.inp;
  s.neighborhood = it->second.nei;
  s.adversarial = it->second.adv;
  s.vat = it->second.vat;
  s.entmin = it->second.ent;
  s.pseudo_labels = it->second.pseudo;
  s.hyperparameters = default_hyperparameters();
  for (const auto &[key, value] : overrides) {
    if (!s.hyperparameters.contains(key))
      throw ConfigError("unknown strategy hyperparameter '" + key + "'");
    s.hyperparameters[key] = value;
  }

  const auto &h = s.hyperparameters;
  auto fail = [](const std::string &what) { throw ConfigError("strategy hyperparameter " + what); };
  if (!(h.at("vat_epsilon") >= 0.0)) fail("vat_epsilon must be >= 0");
  if (!(h.at("vat_xi") > 0.0)) fail("vat_xi must be > 0");
  if (!(h.at("vat_power_iters") >= 1.0) || !is_integer(h.at("vat_power_iters")))
    fail("vat_power_iters must be an integer >= 1");
  if (!(h.at("vat_weight") >= 0.0)) fail("vat_weight must be >= 0");
  if (!(h.at("entmin_weight") >= 0.0)) fail("entmin_weight must be >= 0");
  if (!(h.at("pseudo_threshold") >= 0.0 && h.at("pseudo_threshold") <= 1.0))
    fail("pseudo_threshold must lie in [0, 1]");
  if (!(h.at("pseudo_rounds") >= 1.0) || !is_integer(h.at("pseudo_rounds")))
    fail("pseudo_rounds must be an integer >= 1");
  return s;
}

double StrategySpec::hyper(const std::string &key) const {
  auto it = hyperparameters.find(key);
  if (it == hyperparameters.end()) throw ConfigError("unknown strategy hyperparameter '" + key + "'");
  return it->second;
}

// ---------------------------------------------------------------------------

std::vector<int> select_pseudo_labels(const Matrix &probs, double threshold) {
  std::vector<int> out(static_cast<std::size_t>(probs.cols()), -1);
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.rows(); ++k)
      if (probs(k, c) > probs(best, c)) best = k;
    if (threshold <= 0.0 || probs(best, c) > threshold) out[c] = static_cast<int>(best);
  }
  return out;
}

DatasetSplit pseudo_label_round(const ModelBundle &m, const DatasetSplit &split, double threshold,
                                int frames, std::uint64_t seed) {
  std::vector<SkeletonSequence> labeled = split.labeled();
  if (!split.unlabeled().empty()) {
    const Matrix feats = embed_sequences(m, split.unlabeled(), frames, seed);
    Tape tape(false);
    const Matrix probs = classify(tape, m, tape.constant(feats)).value();
    const std::vector<int> picked = select_pseudo_labels(probs, threshold);
    for (std::size_t i = 0; i < picked.size(); ++i) {
      if (picked[i] < 0) continue;
      SkeletonSequence s = split.unlabeled()[i];
      s.label = picked[i];
      labeled.push_back(std::move(s));
    }
  }
  DatasetSplit out = split;
  out.set_labeled(std::move(labeled));
  return out;
}

// ---------------------------------------------------------------------------

void VatOptions::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("VAT epsilon must be >= 0");
  if (!(xi > 0.0)) throw ConfigError("VAT xi must be > 0");
  if (power_iters < 1) throw ConfigError("VAT power_iters must be >= 1");
}

Matrix normalize_per_sample(const Matrix &d, int steps, int batch) {
  if (d.cols() != static_cast<Eigen::Index>(steps) * batch)
    throw ContractError("normalize_per_sample: expected T*B columns");
  Matrix out = d;
  for (int b = 0; b < batch; ++b) {
    double n2 = 0.0;
    for (int t = 0; t < steps; ++t) n2 += d.col(t * batch + b).squaredNorm();
    const double n = std::sqrt(n2);
    for (int t = 0; t < steps; ++t) {
      if (n > 0.0)
        out.col(t * batch + b) /= n;
      else
        out.col(t * batch + b).setZero();
    }
  }
  return out;
}

namespace {

Var predict(Tape &tape, const ModelBundle &m, Var x, int steps, int batch) {
  return classify(tape, m, translate(tape, m, encode(tape, m, x, steps, batch)));
}

}  // namespace

Matrix vat_perturbation(const ModelBundle &m, const Matrix &x, int steps, int batch,
                        const VatOptions &opt, Rng &rng) {
  opt.validate();
  Matrix p;
  {
    Tape tape(false);
    p = predict(tape, m, tape.constant(x), steps, batch).value();
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix d(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < d.cols(); ++j)
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, j) = normal(rng);
  d = normalize_per_sample(d, steps, batch);

  for (int it = 0; it < opt.power_iters; ++it) {
    Tape tape;
    tape.freeze(m.all_parameters());
    Var r = tape.variable(opt.xi * d);
    Var q = predict(tape, m, tape.constant(x) + r, steps, batch);
    Var kl = ad::sum(kl_divergence_cols(tape.constant(p), q));
    tape.backward(kl);
    Matrix g = tape.grad(r);
    // Keep the previous direction for samples whose gradient vanished.
    Matrix next = normalize_per_sample(g, steps, batch);
    for (int b = 0; b < batch; ++b) {
      double n2 = 0.0;
      for (int t = 0; t < steps; ++t) n2 += next.col(t * batch + b).squaredNorm();
      if (n2 == 0.0) continue;
      for (int t = 0; t < steps; ++t) d.col(t * batch + b) = next.col(t * batch + b);
    }
  }
  return opt.epsilon * d;
}

Var vat_consistency(Tape &tape, const ModelBundle &m, const Matrix &x, const Matrix &r, int steps,
                    int batch) {
  Matrix p;
  {
    Tape clean(false);
    p = predict(clean, m, clean.constant(x), steps, batch).value();
  }
  Var q = predict(tape, m, tape.constant(x + r), steps, batch);
  return ad::mean(kl_divergence_cols(tape.constant(p), q));
}

Var vat_loss(Tape &tape, const ModelBundle &m, const Matrix &x, int steps, int batch,
             const VatOptions &opt, Rng &rng) {
  return vat_consistency(tape, m, x, vat_perturbation(m, x, steps, batch, opt, rng), steps, batch);
}

double vat_loss(const ModelBundle &m, const Frames &x, const VatOptions &opt, std::uint64_t seed) {
  Rng rng(seed);
  const Frames *one[] = {&x};
  const Matrix packed = pack_batch(std::span<const Frames *const>(one));
  Tape tape(false);
  return vat_loss(tape, m, packed, x.frames(), 1, opt, rng).scalar();
}

// ---------------------------------------------------------------------------

double entmin_loss(std::span<const Vector> preds) {
  if (preds.empty()) return 0.0;
  double total = 0.0;
  for (const Vector &p : preds)
    for (Eigen::Index c = 0; c < p.size(); ++c) total -= p(c) * std::log(std::max(p(c), kProbFloor));
  return total / static_cast<double>(preds.size());
}

Var entmin_loss(Var probs) {
  Var plogp = ad::mul(probs, ad::log_floor(probs, kProbFloor));
  return ad::scale(ad::sum(plogp), -1.0 / static_cast<double>(probs.cols()));
}

LossReport s4l_inpainting_objective(double l_sup, double l_inp, double lambda1, double lambda2) {
  LossTerms terms;
  terms.l_sup = l_sup;
  terms.l_inp = l_inp;
  return total_objective(terms, lambda1, lambda2);
}

}  // namespace assl
