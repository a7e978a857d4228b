// SPDX-License-Identifier: Apache-2.0
#include "assl/cli.hpp"

#include "assl/errors.hpp"
#include "assl/plot.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace assl {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config documents

ojson config_to_json(const CliConfig &c) {
  const TrainConfig &t = c.train;
  ojson j;
  j["data"] = c.data;
  j["out_dir"] = c.out_dir;
  j["dump_neighbors"] = c.dump_neighbors;

  ojson s;
  s["name"] = t.strategy.name;
  for (const auto &[k, v] : t.strategy.hyperparameters) {
    const bool integral = k == "vat_power_iters" || k == "pseudo_rounds";
    if (integral)
      s[k] = static_cast<int>(v);
    else
      s[k] = v;
  }
  j["strategy"] = s;

  ojson tr;
  tr["lambda1"] = t.lambda1;
  tr["lambda2"] = t.lambda2;
  tr["K"] = t.K;
  tr["T"] = t.T;
  tr["batch_labeled"] = t.batch_labeled;
  tr["batch_unlabeled"] = t.batch_unlabeled;
  tr["epochs"] = t.epochs;
  tr["lr"] = t.lr;
  tr["lr_decay"] = t.lr_decay;
  tr["lr_decay_every"] = t.lr_decay_every;
  tr["seed"] = t.seed;
  tr["kl_target_stop_gradient"] = t.kl_target_stop_gradient;
  tr["mask_fraction"] = t.mask_fraction;
  tr["disc_steps"] = t.disc_steps;
  tr["encoder_hidden"] = t.encoder_hidden;
  tr["decoder_hidden"] = t.decoder_hidden;
  tr["labels_fraction"] = t.labels_fraction;
  tr["test_fraction"] = t.test_fraction;
  j["train"] = tr;

  const SyntheticConfig &sy = c.synthetic;
  ojson g;
  g["classes"] = sy.classes;
  g["joints"] = sy.joints;
  g["frames"] = sy.frames;
  g["samples_per_class"] = sy.samples_per_class;
  g["noise_scale"] = sy.noise_scale;
  g["seed"] = sy.seed;
  j["synthetic"] = g;

  const AblationOptions &a = c.ablation;
  ojson ab;
  ab["variants"] = a.variants;
  ab["seeds"] = static_cast<int>(a.seeds.size());
  ab["k_values"] = a.k_values;
  ab["k_seeds"] = a.k_seeds;
  ab["threads"] = a.threads;
  j["ablation"] = ab;
  return j;
}

namespace {

void overlay(ojson &base, const nlohmann::json &doc, const std::string &prefix) {
  if (!doc.is_object())
    throw ConfigError(prefix.empty() ? "config document must be a JSON object"
                                     : "config key '" + prefix + "' must be an object");
  for (const auto &[k, v] : doc.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown config key '" + key + "'");
    ojson &b = base[k];
    bool ok;
    if (b.is_object()) {
      overlay(b, v, key);
      continue;
    } else if (b.is_boolean()) {
      ok = v.is_boolean();
    } else if (b.is_number_unsigned()) {
      ok = v.is_number_unsigned();
    } else if (b.is_number_integer()) {
      ok = v.is_number_integer();
    } else if (b.is_number()) {
      ok = v.is_number();
    } else if (b.is_string()) {
      ok = v.is_string();
    } else if (b.is_array()) {
      ok = v.is_array();
    } else {
      ok = false;
    }
    if (!ok) throw ConfigError("config key '" + key + "' has the wrong type");
    b = v;
  }
}

CliConfig from_json(const ojson &j) {
  CliConfig c;
  try {
    c.data = j.at("data").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    c.dump_neighbors = j.at("dump_neighbors").get<bool>();

    std::map<std::string, double> hyper;
    for (const auto &[k, v] : j.at("strategy").items())
      if (k != "name") hyper[k] = v.get<double>();
    TrainConfig &t = c.train;
    t.strategy = StrategySpec::make(j.at("strategy").at("name").get<std::string>(), hyper);

    const ojson &tr = j.at("train");
    t.lambda1 = tr.at("lambda1").get<double>();
    t.lambda2 = tr.at("lambda2").get<double>();
    t.K = tr.at("K").get<int>();
    t.T = tr.at("T").get<int>();
    t.batch_labeled = tr.at("batch_labeled").get<int>();
    t.batch_unlabeled = tr.at("batch_unlabeled").get<int>();
    t.epochs = tr.at("epochs").get<int>();
    t.lr = tr.at("lr").get<double>();
    t.lr_decay = tr.at("lr_decay").get<double>();
    t.lr_decay_every = tr.at("lr_decay_every").get<int>();
    t.seed = tr.at("seed").get<std::uint64_t>();
    t.kl_target_stop_gradient = tr.at("kl_target_stop_gradient").get<bool>();
    t.mask_fraction = tr.at("mask_fraction").get<double>();
    t.disc_steps = tr.at("disc_steps").get<int>();
    t.encoder_hidden = tr.at("encoder_hidden").get<int>();
    t.decoder_hidden = tr.at("decoder_hidden").get<int>();
    t.labels_fraction = tr.at("labels_fraction").get<double>();
    t.test_fraction = tr.at("test_fraction").get<double>();

    const ojson &g = j.at("synthetic");
    c.synthetic.classes = g.at("classes").get<int>();
    c.synthetic.joints = g.at("joints").get<int>();
    c.synthetic.frames = g.at("frames").get<int>();
    c.synthetic.samples_per_class = g.at("samples_per_class").get<int>();
    c.synthetic.noise_scale = g.at("noise_scale").get<double>();
    c.synthetic.seed = g.at("seed").get<std::uint64_t>();

    const ojson &ab = j.at("ablation");
    c.ablation.variants = ab.at("variants").get<std::vector<std::string>>();
    const int seeds = ab.at("seeds").get<int>();
    if (seeds < 1) throw ConfigError("ablation.seeds must be >= 1");
    c.ablation.seeds.clear();
    for (int i = 0; i < seeds; ++i) c.ablation.seeds.push_back(static_cast<std::uint64_t>(i));
    c.ablation.k_values = ab.at("k_values").get<std::vector<int>>();
    c.ablation.k_seeds = ab.at("k_seeds").get<int>();
    c.ablation.threads = ab.at("threads").get<int>();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.train.validate();
  c.synthetic.validate();
  for (const std::string &v : c.ablation.variants) StrategySpec::make(v);
  for (int k : c.ablation.k_values)
    if (k < 1) throw ConfigError("ablation.k_values entries must be >= 1");
  if (c.ablation.k_seeds < 0) throw ConfigError("ablation.k_seeds must be >= 0");
  if (c.ablation.threads < 1) throw ConfigError("ablation.threads must be >= 1");
  return c;
}

void flatten(const ojson &j, const std::string &prefix, std::ostream &out) {
  for (const auto &[k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten(v, key, out);
    else
      out << "  " << std::left << std::setw(34) << key << v.dump() << '\n';
  }
}

}  // namespace

CliConfig apply_config_json(const CliConfig &base, const nlohmann::json &doc) {
  ojson merged = config_to_json(base);
  overlay(merged, doc, "");
  return from_json(merged);
}

CliConfig load_config_file(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error &e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return apply_config_json(CliConfig{}, doc);
}

std::string config_reference() {
  std::ostringstream out;
  out << "Config keys (JSON document, nested by the dotted prefix) and defaults:\n";
  flatten(config_to_json(CliConfig{}), "", out);
  out << "Strategies: ";
  for (std::size_t i = 0; i < strategy_names().size(); ++i)
    out << (i ? ", " : "") << strategy_names()[i];
  out << "\nPrecedence: flags > config file > defaults.\n";
  return out.str();
}

std::vector<SkeletonSequence> load_or_generate(const CliConfig &cfg) {
  if (!cfg.data.empty()) return load_dataset(cfg.data);
  return generate_synthetic(cfg.synthetic);
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> strategy;
  std::optional<double> labels_fraction;
  bool dump_neighbors = false;
  std::optional<std::string> data;

  // gen-data
  std::optional<int> classes, joints, frames, per_class;
  std::optional<double> noise;
  std::string out;

  // eval / export-embeddings
  std::string checkpoint;

  // ablate
  std::string variants;
  std::optional<int> seeds;
  std::optional<std::string> k_values;
  std::optional<int> k_seeds;
  std::optional<int> threads;
};

std::vector<std::string> split_list(const std::string &s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

CliConfig resolve(const Flags &f) {
  CliConfig c = f.config.empty() ? CliConfig{} : load_config_file(f.config);
  nlohmann::json over = nlohmann::json::object();
  if (f.seed) over["train"]["seed"] = *f.seed;
  if (f.out_dir) over["out_dir"] = *f.out_dir;
  if (f.strategy) over["strategy"]["name"] = *f.strategy;
  if (f.labels_fraction) over["train"]["labels_fraction"] = *f.labels_fraction;
  if (f.dump_neighbors) over["dump_neighbors"] = true;
  if (f.data) over["data"] = *f.data;
  if (f.classes) over["synthetic"]["classes"] = *f.classes;
  if (f.joints) over["synthetic"]["joints"] = *f.joints;
  if (f.frames) over["synthetic"]["frames"] = *f.frames;
  if (f.per_class) over["synthetic"]["samples_per_class"] = *f.per_class;
  if (f.noise) over["synthetic"]["noise_scale"] = *f.noise;
  if (!f.variants.empty()) over["ablation"]["variants"] = split_list(f.variants);
  if (f.seeds) over["ablation"]["seeds"] = *f.seeds;
  if (f.k_values) {
    // An empty list disables the sweep.
    std::vector<int> ks;
    for (const std::string &k : split_list(*f.k_values)) {
      try {
        std::size_t used = 0;
        ks.push_back(std::stoi(k, &used));
        if (used != k.size()) throw std::invalid_argument(k);
      } catch (const std::logic_error &) {
        throw ConfigError("--k-values entries must be integers, got '" + k + "'");
      }
    }
    over["ablation"]["k_values"] = ks;
  }
  if (f.k_seeds) over["ablation"]["k_seeds"] = *f.k_seeds;
  if (f.threads) over["ablation"]["threads"] = *f.threads;
  return apply_config_json(c, over);
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

int cmd_gen_data(const CliConfig &c, const Flags &f, std::ostream &out) {
  SyntheticConfig sc = c.synthetic;
  // The global --seed names the corpus seed for this command.
  if (f.seed) sc.seed = *f.seed;
  const std::vector<SkeletonSequence> data = generate_synthetic(sc);
  write_dataset(f.out, data);
  out << "wrote " << data.size() << " samples (" << sc.classes << " classes, " << sc.joints
      << " joints, " << sc.frames << " frames) to " << f.out << '\n';
  return 0;
}

std::vector<double> column(std::span<const MetricsRow> rows, double MetricsRow::*field) {
  std::vector<double> v;
  for (const MetricsRow &r : rows) v.push_back(r.*field);
  return v;
}

void train_plots(const fs::path &dir, std::span<const MetricsRow> rows) {
  std::vector<double> epochs, total, sup, unl, adv, acc, nqr;
  for (const MetricsRow &r : rows) {
    epochs.push_back(r.epoch);
    total.push_back(r.loss.total);
    sup.push_back(r.loss.l_sup);
    unl.push_back(r.loss.l_unlabeled);
    adv.push_back(r.loss.l_adv);
  }
  acc = column(rows, &MetricsRow::test_accuracy);
  nqr = column(rows, &MetricsRow::neighbor_quality_ratio);
  write_line_plot_svg(dir / "loss.svg", "Training loss", "epoch", "loss",
                      {{"total", epochs, total}, {"l_sup", epochs, sup},
                       {"l_unlabeled", epochs, unl}, {"l_adv", epochs, adv}});
  write_line_plot_svg(dir / "accuracy.svg", "Test accuracy and neighbor quality", "epoch",
                      "fraction", {{"test accuracy", epochs, acc}, {"neighbor quality", epochs, nqr}});
}

int cmd_train(const CliConfig &c, std::ostream &out) {
  const std::vector<SkeletonSequence> data = load_or_generate(c);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(c).dump(2) + "\n");
  ExperimentOptions eo;
  eo.out_dir = dir;
  eo.dump_neighbors = c.dump_neighbors;
  eo.on_epoch = [&](const MetricsRow &r) {
    out << "epoch " << r.epoch << " lr " << r.lr << " total " << r.loss.total << " test_acc "
        << r.test_accuracy << " nqr " << r.neighbor_quality_ratio << '\n';
  };
  const ExperimentResult res = run_seeded(c.train, data, eo);
  train_plots(dir, res.rows);
  const RunSummary s = summarize_run(c.train, res);
  out << "strategy " << s.strategy << " seed " << s.seed << " best_accuracy " << s.best_accuracy
      << " final_accuracy " << s.final_accuracy << '\n';
  return 0;
}

ModelBundle checked_checkpoint(const CliConfig &c, const Flags &f) {
  const fs::path ckpt = f.checkpoint.empty() ? fs::path(c.out_dir) / "checkpoint.bin"
                                             : fs::path(f.checkpoint);
  return load_checkpoint(ckpt);
}

DatasetSplit split_for(const CliConfig &c, const ModelBundle &m) {
  const std::vector<SkeletonSequence> data = load_or_generate(c);
  DatasetSplit split =
      make_split(data, c.train.labels_fraction, c.train.split_seed(), c.train.test_fraction);
  const int joints = split.labeled().at(0).frames.joints();
  if (joints != m.dims.joints || split.classes() != m.dims.classes)
    throw CheckpointError("checkpoint expects " + std::to_string(m.dims.joints) + " joints and " +
                          std::to_string(m.dims.classes) + " classes, data has " +
                          std::to_string(joints) + " and " + std::to_string(split.classes()));
  return split;
}

int cmd_eval(const CliConfig &c, const Flags &f, std::ostream &out) {
  const ModelBundle m = checked_checkpoint(c, f);
  const DatasetSplit split = split_for(c, m);
  const double acc = evaluate(m, split.test(), m.dims.frames, c.train.feature_seed());
  ojson j;
  j["test_accuracy"] = acc;
  j["test_samples"] = split.test().size();
  out << j.dump() << '\n';
  return 0;
}

int cmd_export(const CliConfig &c, const Flags &f, std::ostream &out) {
  const ModelBundle m = checked_checkpoint(c, f);
  const DatasetSplit split = split_for(c, m);
  const fs::path path = f.out.empty() ? fs::path(c.out_dir) / "embeddings.tsv" : fs::path(f.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  export_embeddings(m, split, m.dims.frames, c.train.feature_seed(), path);
  out << "wrote " << split.labeled().size() + split.unlabeled().size() + split.test().size()
      << " embeddings to " << path.string() << '\n';
  return 0;
}

int cmd_ablate(const CliConfig &c, std::ostream &out) {
  const std::vector<SkeletonSequence> data = load_or_generate(c);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(c).dump(2) + "\n");
  AblationOptions opt = c.ablation;
  for (std::uint64_t &s : opt.seeds) s += c.train.seed;
  opt.out_dir = dir;
  const AblationReport rep = run_ablation(c.train, data, opt);

  write_ablation_csv(dir / "ablation.csv", rep.table);
  for (const AblationRow &r : rep.table)
    out << r.variant << " seeds " << r.seeds << " mean_acc " << r.mean_acc << " std_acc "
        << r.std_acc << '\n';
  if (!rep.k_curve.empty()) {
    write_k_sweep_csv(dir / "k_sweep.csv", rep.k_curve);
    PlotSeries curve{"assl", {}, {}};
    for (const KSweepPoint &p : rep.k_curve) {
      curve.x.push_back(p.K);
      curve.y.push_back(p.mean_acc);
      out << "K " << p.K << " mean_acc " << p.mean_acc << '\n';
    }
    write_line_plot_svg(dir / "k_sweep.svg", "Accuracy versus neighborhood size", "K",
                        "mean test accuracy", {curve});
  }
  if (!rep.nqr_curve.empty()) {
    std::ofstream csv(dir / "neighbor_quality.csv");
    csv << "epoch,neighbor_quality_ratio\n";
    PlotSeries curve{"assl", {}, {}};
    for (std::size_t e = 0; e < rep.nqr_curve.size(); ++e) {
      csv << e << ',' << std::setprecision(17) << rep.nqr_curve[e] << '\n';
      curve.x.push_back(static_cast<double>(e));
      curve.y.push_back(rep.nqr_curve[e]);
    }
    write_line_plot_svg(dir / "neighbor_quality.svg", "Neighbor quality over training", "epoch",
                        "neighbor quality ratio", {curve});
  }
  return 0;
}

}  // namespace

int run_cli(int argc, char **argv, std::ostream &out, std::ostream &err) {
  CLI::App app{"Adversarial self-supervised learning for skeleton action recognition", "assl"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(config_reference());

  Flags f;
  app.add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Training seed (corpus seed for gen-data)");
  app.add_option("--out-dir", f.out_dir, "Output directory");
  app.add_option("--strategy", f.strategy, "Training strategy");
  app.add_option("--labels-fraction", f.labels_fraction, "Fraction of training labels kept");
  app.add_flag("--dump-neighbors", f.dump_neighbors, "Write per-epoch neighbor CSVs");
  app.add_option("--data", f.data, "JSONL dataset (default: synthetic corpus)");

  CLI::App *gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--classes", f.classes, "Number of classes");
  gen->add_option("--joints", f.joints, "Joints per pose");
  gen->add_option("--frames", f.frames, "Frames per sequence");
  gen->add_option("--per-class", f.per_class, "Samples per class");
  gen->add_option("--noise", f.noise, "Gaussian noise scale");
  gen->add_option("--out", f.out, "Output JSONL path")->required();

  CLI::App *train = app.add_subcommand("train", "Train one model and write metrics");
  CLI::App *eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", f.checkpoint, "Checkpoint (default <out_dir>/checkpoint.bin)");
  CLI::App *ablate = app.add_subcommand("ablate", "Run the ablation table and K sweep");
  ablate->add_option("--variants", f.variants, "Comma-separated variant names");
  ablate->add_option("--seeds", f.seeds, "Number of seeds");
  ablate->add_option("--k-values", f.k_values, "Comma-separated K values for the sweep");
  ablate->add_option("--k-seeds", f.k_seeds, "Seeds per K value");
  ablate->add_option("--threads", f.threads, "Parallel runs");
  CLI::App *exp = app.add_subcommand("export-embeddings", "Dump translated features as TSV");
  exp->add_option("--checkpoint", f.checkpoint, "Checkpoint (default <out_dir>/checkpoint.bin)");
  exp->add_option("--out", f.out, "TSV path (default <out_dir>/embeddings.tsv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  CliConfig cfg;
  try {
    cfg = resolve(f);
  } catch (const ConfigError &e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(cfg, f, out);
    if (*train) return cmd_train(cfg, out);
    if (*eval) return cmd_eval(cfg, f, out);
    if (*ablate) return cmd_ablate(cfg, out);
    if (*exp) return cmd_export(cfg, f, out);
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace assl
