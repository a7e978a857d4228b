// SPDX-License-Identifier: Apache-2.0
// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero when any of them fails.
//
//   acceptance [--config standard.json] [--work-dir DIR] [--threads N] [--only 1,2,...]
#include "assl/baselines.hpp"
#include "assl/cli.hpp"
#include "assl/errors.hpp"
#include "assl/losses.hpp"
#include "assl/trainer.hpp"

#include "support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace assl;
using testing::random_matrix;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. KNN against brute force

Verdict knn_oracle() {
  const auto t0 = Clock::now();
  std::size_t queries = 0, mismatches = 0;
  const int ks[] = {1, 5, 10, 5, 10};
  const int sizes[] = {500, 500, 500, 300, 120};
  for (int inst = 0; inst < 5; ++inst) {
    Rng rng(9000 + static_cast<std::uint64_t>(inst));
    const FeatureBank bank = testing::random_bank(sizes[inst], 20, 16, 4, rng);
    const auto &ids = bank.unlabeled_ids();
    const Matrix &pool = bank.unlabeled_features();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Vector f = pool.col(static_cast<Eigen::Index>(i));
      ++queries;
      if (knn_query(bank, ids[i], f, ks[inst]).neighbor_ids !=
          testing::brute_force_knn(ids, pool, ids[i], f, ks[inst]))
        ++mismatches;
    }
    for (std::size_t i = 0; i < bank.labeled_ids().size(); ++i) {
      const Vector f = bank.labeled_features().col(static_cast<Eigen::Index>(i));
      ++queries;
      if (knn_query(bank, bank.labeled_ids()[i], f, ks[inst]).neighbor_ids !=
          testing::brute_force_knn(ids, pool, bank.labeled_ids()[i], f, ks[inst]))
        ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          std::to_string(queries - mismatches) + "/" + std::to_string(queries) +
              " queries agree, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Positive selection against brute force

Verdict positive_oracle() {
  std::size_t anchors = 0, mismatches = 0;
  for (int inst = 0; inst < 5; ++inst) {
    Rng rng(9100 + static_cast<std::uint64_t>(inst));
    const FeatureBank bank = testing::random_bank(50, 20, 8, 3, rng);
    for (std::size_t i = 0; i < bank.unlabeled_ids().size(); ++i) {
      const std::string &id = bank.unlabeled_ids()[i];
      const NeighborSet ns =
          knn_query(bank, id, bank.unlabeled_features().col(static_cast<Eigen::Index>(i)), 5);
      ++anchors;
      if (select_positive(ns, bank).positive_ids !=
          testing::brute_force_positives(bank.unlabeled_ids(), bank.unlabeled_features(),
                                         bank.labeled_ids(), bank.labeled_features(),
                                         bank.labeled_labels(), id, ns.neighbor_ids))
        ++mismatches;
    }
  }
  return {mismatches == 0,
          std::to_string(anchors - mismatches) + "/" + std::to_string(anchors) + " anchors agree"};
}

// ---------------------------------------------------------------------------
// 3. Numeric identities

Verdict numeric_identities() {
  Rng rng(9200);
  double worst_sum = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const ModelBundle m = testing::toy_bundle(static_cast<std::uint64_t>(draw));
    const int k = 1 + static_cast<int>(rng() % 20);
    const Vector w = attention_weights(m, random_matrix(8, 1, rng, 2.0), random_matrix(8, k, rng, 2.0));
    worst_sum = std::max(worst_sum, std::abs(w.sum() - 1.0));
  }
  double worst_kl = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const Matrix p = testing::random_distributions(2 + draw % 9, 1, rng);
    worst_kl = std::max(worst_kl, std::abs(kl_divergence(p.col(0), p.col(0))));
  }
  const std::vector<double> half_l(7, 0.5), half_u(11, 0.5);
  const double adv_err = std::abs(adversarial_loss(half_l, half_u) + 2.0 * std::numbers::ln2);
  double ce_err = 0.0;
  for (int c : {2, 3, 6, 10, 60}) {
    std::vector<Vector> preds(5, Vector::Constant(c, 1.0 / c));
    std::vector<int> labels = {0, c - 1, 1, 0, c / 2};
    ce_err = std::max(ce_err, std::abs(cross_entropy(preds, labels) - std::log(double(c))));
  }
  const bool ok = worst_sum <= 1e-6 && worst_kl <= 1e-10 && adv_err <= 1e-9 && ce_err <= 1e-9;
  return {ok, "|sum w - 1| " + fmt(worst_sum, 3) + ", KL(p,p) " + fmt(worst_kl, 3) +
                  ", adv+2ln2 " + fmt(adv_err, 3) + ", CE-lnC " + fmt(ce_err, 3)};
}

// ---------------------------------------------------------------------------
// 4. Gradient checks at toy dims

struct Toy {
  static constexpr int kT = 5, kB = 3, kK = 2;
  ModelBundle m = testing::toy_bundle(9300);
  Rng rng{9301};
  std::vector<Frames> xs;
  Matrix x;
  std::vector<int> labels = {0, 2, 1};
  Matrix nb, pos;
  std::vector<Eigen::Index> owner = {0, 2, 2};

  Toy() {
    for (Parameter *p : m.all_parameters())
      if (p->name.find("bias") != std::string::npos || p->name.find("b_") != std::string::npos)
        p->value = random_matrix(static_cast<int>(p->value.rows()), static_cast<int>(p->value.cols()),
                                 rng, 0.3);
    for (Linear &l : m.aggregator.layers) l.bias.value.setConstant(1.0);
    for (int b = 0; b < kB; ++b) xs.push_back(testing::random_frames(kT, 2, rng));
    x = pack_batch(std::span<const Frames>(xs));
    nb = random_matrix(8, kB * kK, rng);
    pos = random_matrix(8, 3, rng);
  }
  Var features(Tape &t) { return translate(t, m, encode(t, m, t.constant(x), kT, kB)); }
  Var center_probs(Tape &t) {
    Var w = attention_weights(t, m, features(t), nb, kK);
    return classify(t, m, local_center(w, t.constant(nb), kK));
  }
};

Verdict gradient_checks() {
  const auto t0 = Clock::now();
  Toy toy;
  ModelBundle &m = toy.m;
  std::vector<std::pair<std::string, testing::GradCheck>> results;
  auto run = [&](const std::string &name, std::vector<Parameter *> ps, const testing::LossBuilder &f,
                 const testing::LossBuilder &frozen = {}) {
    results.emplace_back(name, frozen ? testing::check_gradients(ps, f, frozen)
                                      : testing::check_gradients(ps, f));
  };

  run("L_L", m.model_parameters(),
      [&](Tape &t) { return cross_entropy(classify(t, m, toy.features(t)), toy.labels); });

  std::vector<Frames> masked;
  for (const Frames &f : toy.xs) masked.push_back(apply_mask(f, MaskSpec{1, 2}));
  const Matrix xm = pack_batch(std::span<const Frames>(masked));
  run("L_inp", m.model_parameters(), [&](Tape &t) {
    Var h = encode(t, m, t.constant(xm), Toy::kT, Toy::kB);
    return inpainting_loss(decode(t, m, h, t.constant(xm), Toy::kT, Toy::kB), t.constant(toy.x));
  });

  Matrix target;
  {
    Tape t(false);
    target = toy.center_probs(t).value();
  }
  run(
      "L_KL", m.model_parameters(),
      [&](Tape &t) {
        return neighborhood_kl_loss(toy.center_probs(t), classify(t, m, toy.features(t)),
                                    classify(t, m, t.constant(toy.pos)), toy.owner, true);
      },
      [&](Tape &t) {
        return neighborhood_kl_loss(t.constant(target), classify(t, m, toy.features(t)),
                                    classify(t, m, t.constant(toy.pos)), toy.owner, false);
      });
  run("L_KL(no stop)", m.model_parameters(), [&](Tape &t) {
    return neighborhood_kl_loss(toy.center_probs(t), classify(t, m, toy.features(t)),
                                classify(t, m, t.constant(toy.pos)), toy.owner, false);
  });
  run("L_CE^c", m.model_parameters(),
      [&](Tape &t) { return cross_entropy(toy.center_probs(t), toy.labels); });

  std::vector<Parameter *> all = m.model_parameters();
  for (Parameter *p : m.discriminator_parameters()) all.push_back(p);
  std::vector<Frames> other;
  for (int b = 0; b < 2; ++b) other.push_back(testing::random_frames(Toy::kT, 2, toy.rng));
  const Matrix xu = pack_batch(std::span<const Frames>(other));
  run("L_adv", all, [&](Tape &t) {
    Var hu = translate(t, m, encode(t, m, t.constant(xu), Toy::kT, 2));
    return adversarial_loss(discriminate(t, m, toy.features(t)), discriminate(t, m, hu));
  });

  const Matrix dir = random_matrix(static_cast<int>(toy.x.rows()), static_cast<int>(toy.x.cols()),
                                   toy.rng, 0.5);
  Matrix clean;
  {
    Tape t(false);
    clean = classify(t, m, toy.features(t)).value();
  }
  run(
      "VAT", m.model_parameters(),
      [&](Tape &t) { return vat_consistency(t, m, toy.x, dir, Toy::kT, Toy::kB); },
      [&](Tape &t) {
        Var q = classify(t, m, translate(t, m, encode(t, m, t.constant(toy.x + dir), Toy::kT, Toy::kB)));
        return ad::scale(ad::sum(kl_divergence_cols(t.constant(clean), q)), 1.0 / Toy::kB);
      });
  run("EntMin", m.model_parameters(),
      [&](Tape &t) { return entmin_loss(classify(t, m, toy.features(t))); });

  const double secs = seconds_since(t0);
  bool ok = secs < 120.0;
  std::ostringstream detail;
  for (const auto &[name, g] : results) {
    ok = ok && g.checked > 0 && g.max_rel_error < 1e-4;
    detail << name << ' ' << fmt(g.max_rel_error, 2) << ", ";
  }
  detail << fmt(secs, 3) << " s";
  return {ok, detail.str()};
}

// ---------------------------------------------------------------------------
// 5-8. Training criteria on the standard synthetic config

struct Sweep {
  CliConfig cfg;
  AblationReport report;
  fs::path dir;
  double seconds = 0.0;
  int threads = 1;

  const RunSummary &run(const std::string &variant, int k, std::uint64_t seed) const {
    for (const RunSummary &r : report.runs)
      if (r.strategy == variant && r.K == k && r.seed == seed) return r;
    throw Error("no run for " + variant);
  }
  const AblationRow &row(const std::string &variant) const {
    for (const AblationRow &r : report.table)
      if (r.variant == variant) return r;
    throw Error("no row for " + variant);
  }
  double run_seconds(const std::string &variant) const {
    double total = 0.0;
    for (std::uint64_t s : cfg.ablation.seeds) {
      std::ifstream in(dir / "runs" / (variant + "_K" + std::to_string(cfg.train.K) + "_seed" +
                                       std::to_string(s)) / "timing.csv");
      std::string line;
      std::getline(in, line);
      double last = 0.0;
      while (std::getline(in, line)) last = std::stod(line.substr(line.find(',') + 1));
      total += last;
    }
    return total;
  }
};

Sweep run_sweep(const fs::path &config, const fs::path &dir, int threads) {
  Sweep s;
  s.cfg = load_config_file(config);
  s.dir = dir;
  s.threads = threads;
  AblationOptions opt = s.cfg.ablation;
  opt.variants = {"sup", "sup_inp_nei", "assl"};
  opt.k_values = {1, 2, 5, 10, 20};
  opt.k_seeds = 3;
  opt.threads = threads;
  opt.out_dir = dir;
  const auto t0 = Clock::now();
  s.report = run_ablation(s.cfg.train, load_or_generate(s.cfg), opt);
  s.seconds = seconds_since(t0);
  fs::create_directories(dir);
  write_ablation_csv(dir / "ablation.csv", s.report.table);
  write_k_sweep_csv(dir / "k_sweep.csv", s.report.k_curve);
  return s;
}

Verdict semi_supervised_gain(const Sweep &s) {
  const double sup = s.row("sup").mean_acc, assl = s.row("assl").mean_acc;
  const double gain = 100.0 * (assl - sup);
  // Runs are independent, so on a 4-core machine the ten runs spread over
  // four workers. With fewer cores the estimate divides measured run time.
  const double run_time = s.run_seconds("sup") + s.run_seconds("assl");
  const double four_core = run_time / 4.0;
  return {gain >= 5.0 && four_core < 900.0,
          "assl " + fmt(100 * assl) + "% vs sup " + fmt(100 * sup) + "% (gain " + fmt(gain, 3) +
              " points, need >= 5), run time " + fmt(run_time, 4) + " s, 4-core estimate " +
              fmt(four_core, 4) + " s"};
}

Verdict adversarial_ablation(const Sweep &s) {
  const double with = s.row("assl").mean_acc, without = s.row("sup_inp_nei").mean_acc;
  return {with >= without, "with adv " + fmt(100 * with) + "%, without " + fmt(100 * without) + "%"};
}

Verdict neighbor_quality_trend(const Sweep &s) {
  bool ok = true;
  std::ostringstream d;
  for (std::uint64_t seed : s.cfg.ablation.seeds) {
    const RunSummary &r = s.run("assl", s.cfg.train.K, seed);
    ok = ok && r.final_nqr >= r.first_nqr;
    d << "seed " << seed << ' ' << fmt(r.first_nqr, 3) << "->" << fmt(r.final_nqr, 3) << "; ";
  }
  return {ok, d.str()};
}

Verdict k_sweep(const Sweep &s) {
  std::map<int, double> curve;
  for (const KSweepPoint &p : s.report.k_curve) curve[p.K] = p.mean_acc;
  const bool emitted = curve.size() == 5 && fs::exists(s.dir / "k_sweep.csv");
  std::ostringstream d;
  for (const auto &[k, acc] : curve) d << "K" << k << ' ' << fmt(100 * acc) << "%; ";
  return {emitted && curve.count(1) && curve.count(10) && curve.at(10) >= curve.at(1), d.str()};
}

// ---------------------------------------------------------------------------
// 9-10. Determinism and schedule, through the command-line front end

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "assl");
  std::vector<char *> argv;
  for (std::string &a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// Trains the standard config with the assl strategy and seed 0. When the
// sweep already ran that exact configuration its metrics serve as the first
// run; otherwise the command runs twice.
Verdict determinism(const fs::path &config, const fs::path &dir, const fs::path &reference) {
  auto train = [&](const fs::path &out) {
    return cli({"--config", config.string(), "--strategy", "assl", "--seed", "0", "--out-dir",
                out.string(), "train"}) == 0;
  };
  fs::path first = reference;
  if (!fs::exists(first)) {
    if (!train(dir / "det_a")) return {false, "train failed"};
    first = dir / "det_a" / "metrics.csv";
  }
  if (!train(dir / "det_b")) return {false, "train failed"};
  const std::string ma = slurp(first), mb = slurp(dir / "det_b" / "metrics.csv");
  return {!ma.empty() && ma == mb,
          std::to_string(std::count(ma.begin(), ma.end(), '\n')) + " lines, " +
              (ma == mb ? "identical" : "different")};
}

Verdict schedule(const fs::path &dir) {
  // Default lr, decay factor and period; everything else shrunk so that 61
  // epochs finish quickly.
  const fs::path cfg = dir / "schedule.json";
  std::ofstream(cfg) << R"({
    "synthetic": {"classes": 3, "joints": 2, "frames": 12, "samples_per_class": 6},
    "train": {"T": 5, "K": 2, "encoder_hidden": 2, "decoder_hidden": 2,
              "batch_labeled": 8, "batch_unlabeled": 8, "epochs": 61,
              "labels_fraction": 0.5, "test_fraction": 0.2}
  })";
  if (cli({"--config", cfg.string(), "--out-dir", (dir / "schedule").string(), "train"}) != 0)
    return {false, "train failed"};
  for (const MetricsRow &r : read_metrics_csv(dir / "schedule" / "metrics.csv"))
    if (r.epoch == 60)
      return {r.lr == 0.000125, "lr at epoch 60 = " + fmt(r.lr, 17)};
  return {false, "no epoch 60 row"};
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Acceptance criteria runner", "acceptance"};
  std::string config = ASSL_STANDARD_CONFIG;
  std::string work = (fs::temp_directory_path() / "assl_acceptance").string();
  int threads = static_cast<int>(std::max(1u, std::min(4u, std::thread::hardware_concurrency())));
  std::vector<int> only;
  app.add_option("--config", config, "Standard synthetic config")->check(CLI::ExistingFile);
  app.add_option("--work-dir", work, "Scratch directory for runs");
  app.add_option("--threads", threads, "Parallel training runs");
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted(only.begin(), only.end());
  auto want = [&](int c) { return wanted.empty() || wanted.count(c) > 0; };
  fs::remove_all(work);
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int id, const std::string &name, const Verdict &v) {
    std::cout << (v.pass ? "PASS" : "FAIL") << ' ' << id << ' ' << name << ": " << v.detail
              << std::endl;
    if (!v.pass) ++failures;
  };
  auto guarded = [&](int id, const std::string &name, auto fn) {
    if (!want(id)) return;
    try {
      report(id, name, fn());
    } catch (const std::exception &e) {
      report(id, name, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "knn matches brute force", knn_oracle);
  guarded(2, "positive selection matches brute force", positive_oracle);
  guarded(3, "numeric identities", numeric_identities);
  guarded(4, "gradient checks", gradient_checks);

  if (want(5) || want(6) || want(7) || want(8)) {
    std::optional<Sweep> sweep;
    std::string error;
    try {
      sweep = run_sweep(config, fs::path(work) / "sweep", threads);
      std::cout << "sweep: " << sweep->report.runs.size() << " runs on " << threads
                << " thread(s) in " << fmt(sweep->seconds, 4) << " s" << std::endl;
    } catch (const std::exception &e) {
      error = e.what();
    }
    auto on_sweep = [&](int id, const std::string &name, Verdict (*fn)(const Sweep &)) {
      guarded(id, name, [&] { return sweep ? fn(*sweep) : Verdict{false, "sweep failed: " + error}; });
    };
    on_sweep(5, "semi-supervised gain", semi_supervised_gain);
    on_sweep(6, "adversarial ablation", adversarial_ablation);
    on_sweep(7, "neighbor quality trend", neighbor_quality_trend);
    on_sweep(8, "K sweep", k_sweep);
  }

  guarded(9, "bitwise deterministic metrics", [&] {
    const CliConfig std_cfg = load_config_file(config);
    const fs::path ref = fs::path(work) / "sweep" / "runs" /
                         ("assl_K" + std::to_string(std_cfg.train.K) + "_seed0") / "metrics.csv";
    return determinism(config, work, ref);
  });
  guarded(10, "learning-rate schedule", [&] { return schedule(work); });
  return failures == 0 ? 0 : 1;
}
