// SPDX-License-Identifier: Apache-2.0
#include "assl/skeleton_data.hpp"

#include "assl/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

namespace assl {

using json = nlohmann::json;

Frames::Frames(int frames, int joints)
    : frames_(frames), joints_(joints), data_(std::size_t(frames) * joints * 3, 0.0) {}

Frames::Frames(int frames, int joints, std::vector<double> coords)
    : frames_(frames), joints_(joints), data_(std::move(coords)) {
  if (data_.size() != std::size_t(frames) * joints * 3)
    throw ContractError("Frames: coordinate count does not match (T, J, 3)");
}

bool Frames::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void SkeletonSequence::validate(int classes) const {
  if (frames.frames() < 2) throw SchemaError("sequence '" + id + "': needs at least 2 frames");
  if (frames.joints() < 1) throw SchemaError("sequence '" + id + "': needs at least 1 joint");
  if (!frames.all_finite()) throw SchemaError("sequence '" + id + "': non-finite coordinate");
  if (label && (*label < 0 || (classes > 0 && *label >= classes)))
    throw SchemaError("sequence '" + id + "': label " + std::to_string(*label) + " out of range");
}

std::optional<int> EvaluationLabels::find(const std::string &id) const {
  auto it = labels_.find(id);
  if (it == labels_.end()) return std::nullopt;
  return it->second;
}

int EvaluationLabels::at(const std::string &id) const {
  auto it = labels_.find(id);
  if (it == labels_.end()) throw ContractError("no evaluation label for '" + id + "'");
  return it->second;
}

DatasetSplit::DatasetSplit(std::vector<SkeletonSequence> labeled,
                           std::vector<SkeletonSequence> unlabeled,
                           std::vector<SkeletonSequence> test, double fraction, int classes)
    : labeled_(std::move(labeled)),
      unlabeled_(std::move(unlabeled)),
      test_(std::move(test)),
      fraction_(fraction),
      classes_(classes) {
  for (SkeletonSequence &s : unlabeled_) {
    if (s.label) hidden_.set(s.id, *s.label);
    s.label.reset();
  }
}

void MaskSpec::validate(int frames) const {
  if (start < 0 || length < 1 || start + length > frames)
    throw ContractError("mask [" + std::to_string(start) + ", +" + std::to_string(length) +
                        ") invalid for " + std::to_string(frames) + " frames");
}

void SyntheticConfig::validate() const {
  if (classes < 2) throw ConfigError("synthetic: classes must be >= 2");
  if (joints < 1 || frames < 2 || samples_per_class < 1)
    throw ConfigError("synthetic: joints, frames (>= 2) and samples_per_class must be positive");
  if (!(noise_scale >= 0.0)) throw ConfigError("synthetic: noise_scale must be >= 0");
}

// ---------------------------------------------------------------------------
// I/O

namespace {

SkeletonSequence parse_record(const json &rec, std::size_t line) {
  if (!rec.is_object()) throw ParseError(line, "record is not a JSON object");
  for (const auto &[key, _] : rec.items())
    if (key != "id" && key != "label" && key != "frames")
      throw ParseError(line, "unknown field '" + key + "'");
  if (!rec.contains("id") || !rec["id"].is_string()) throw ParseError(line, "missing string 'id'");
  if (!rec.contains("frames") || !rec["frames"].is_array())
    throw ParseError(line, "missing array 'frames'");

  SkeletonSequence seq;
  seq.id = rec["id"].get<std::string>();
  if (rec.contains("label") && !rec["label"].is_null()) {
    if (!rec["label"].is_number_integer()) throw ParseError(line, "'label' must be integer or null");
    seq.label = rec["label"].get<int>();
  }

  const json &fr = rec["frames"];
  const int t_raw = static_cast<int>(fr.size());
  if (t_raw < 2) throw SchemaError("line " + std::to_string(line) + ": needs at least 2 frames");
  if (!fr[0].is_array()) throw ParseError(line, "frame 0 is not an array");
  const int joints = static_cast<int>(fr[0].size());
  std::vector<double> coords;
  coords.reserve(std::size_t(t_raw) * joints * 3);
  for (int t = 0; t < t_raw; ++t) {
    const json &f = fr[t];
    if (!f.is_array() || static_cast<int>(f.size()) != joints)
      throw SchemaError("line " + std::to_string(line) + ": frame " + std::to_string(t) +
                        " has inconsistent joint count");
    for (const json &joint : f) {
      if (!joint.is_array() || joint.size() != 3)
        throw SchemaError("line " + std::to_string(line) + ": joint entries must be [x, y, z]");
      for (const json &v : joint) {
        if (!v.is_number()) throw ParseError(line, "coordinate is not a number");
        coords.push_back(v.get<double>());
      }
    }
  }
  seq.frames = Frames(t_raw, joints, std::move(coords));
  try {
    seq.validate();
  } catch (const SchemaError &e) {
    throw SchemaError("line " + std::to_string(line) + ": " + e.what());
  }
  return seq;
}

}  // namespace

std::vector<SkeletonSequence> load_dataset(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path.string() + "'");
  std::vector<SkeletonSequence> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(text);
    } catch (const json::parse_error &e) {
      throw ParseError(line, e.what());
    }
    SkeletonSequence seq = parse_record(rec, line);
    if (!out.empty() && seq.frames.joints() != out.front().frames.joints())
      throw SchemaError("line " + std::to_string(line) + ": joint count " +
                        std::to_string(seq.frames.joints()) + " differs from " +
                        std::to_string(out.front().frames.joints()));
    out.push_back(std::move(seq));
  }
  return out;
}

void write_dataset(const std::filesystem::path &path, std::span<const SkeletonSequence> data) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path.string() + "'");
  for (const SkeletonSequence &s : data) {
    json frames = json::array();
    for (int t = 0; t < s.frames.frames(); ++t) {
      json f = json::array();
      for (int j = 0; j < s.frames.joints(); ++j)
        f.push_back({s.frames.at(t, j, 0), s.frames.at(t, j, 1), s.frames.at(t, j, 2)});
      frames.push_back(std::move(f));
    }
    json rec = {{"id", s.id}, {"label", s.label ? json(*s.label) : json(nullptr)},
                {"frames", std::move(frames)}};
    out << rec.dump() << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Splitting

int count_classes(std::span<const SkeletonSequence> data) {
  int classes = 0;
  for (const SkeletonSequence &s : data)
    if (s.label) classes = std::max(classes, *s.label + 1);
  return classes;
}

DatasetSplit make_split(std::span<const SkeletonSequence> data, double fraction,
                        std::uint64_t seed, double test_fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw SplitError("labels fraction must be in (0, 1]");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw SplitError("test fraction must be in [0, 1)");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].label) throw SplitError("sequence '" + data[i].id + "' has no label");
    by_class[*data[i].label].push_back(i);
  }
  const int classes = count_classes(data);

  Rng rng(mix_seed(seed, 0x5311));
  enum class Pool { labeled, unlabeled, test };
  std::vector<Pool> role(data.size(), Pool::unlabeled);
  for (auto &[cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * n));
    const auto n_train = idx.size() - n_test;
    const auto n_lab = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n_train)));
    if (n_lab == 0)
      throw SplitError("class " + std::to_string(cls) + " would receive no labeled sample");
    for (std::size_t k = 0; k < n_test; ++k) role[idx[k]] = Pool::test;
    for (std::size_t k = n_test; k < n_test + n_lab; ++k) role[idx[k]] = Pool::labeled;
  }

  std::vector<SkeletonSequence> labeled, unlabeled, test;
  for (std::size_t i = 0; i < data.size(); ++i) {
    switch (role[i]) {
      case Pool::labeled: labeled.push_back(data[i]); break;
      case Pool::unlabeled: unlabeled.push_back(data[i]); break;
      case Pool::test: test.push_back(data[i]); break;
    }
  }
  return DatasetSplit(std::move(labeled), std::move(unlabeled), std::move(test), fraction, classes);
}

// ---------------------------------------------------------------------------
// Frame sampling and masking

std::vector<int> sample_frame_indices(int raw_frames, int frames, std::uint64_t seed) {
  if (frames < 1 || raw_frames < 1) throw ContractError("sample_frames: T and T_raw must be >= 1");
  std::vector<int> pool;
  if (raw_frames >= frames) {
    pool.resize(raw_frames);
    std::iota(pool.begin(), pool.end(), 0);
  } else {
    const int reps = (frames + raw_frames - 1) / raw_frames;
    for (int r = 0; r < reps; ++r)
      for (int t = 0; t < raw_frames; ++t) pool.push_back(t);
  }
  std::vector<int> chosen;
  chosen.reserve(frames);
  Rng rng(seed);
  std::sample(pool.begin(), pool.end(), std::back_inserter(chosen), frames, rng);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

Frames sample_frames(const Frames &x, int frames, std::uint64_t seed) {
  const std::vector<int> idx = sample_frame_indices(x.frames(), frames, seed);
  Frames out(frames, x.joints());
  for (int t = 0; t < frames; ++t) std::ranges::copy(x.frame(idx[t]), out.frame(t).begin());
  return out;
}

Frames center_on_first_frame(const Frames &x) {
  double c[3] = {0.0, 0.0, 0.0};
  for (int j = 0; j < x.joints(); ++j)
    for (int a = 0; a < 3; ++a) c[a] += x.at(0, j, a);
  for (double &v : c) v /= x.joints();
  Frames out = x;
  for (int t = 0; t < x.frames(); ++t)
    for (int j = 0; j < x.joints(); ++j)
      for (int a = 0; a < 3; ++a) out.at(t, j, a) -= c[a];
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, const std::string &id) {
  return mix_seed(seed, stable_hash(id));
}

Frames prepare_input(const SkeletonSequence &seq, int frames, std::uint64_t seed) {
  return sample_frames(center_on_first_frame(seq.frames), frames, sample_seed(seed, seq.id));
}

Frames apply_mask(const Frames &x, const MaskSpec &m) {
  m.validate(x.frames());
  Frames out = x;
  for (int t = m.start; t < m.start + m.length; ++t) std::ranges::fill(out.frame(t), 0.0);
  return out;
}

MaskSpec random_mask(int frames, double fraction, Rng &rng) {
  if (frames < 1) throw ContractError("random_mask: T must be >= 1");
  const int length = std::clamp(static_cast<int>(std::lround(fraction * frames)), 1, frames);
  std::uniform_int_distribution<int> start(0, frames - length);
  return MaskSpec{start(rng), length};
}

// ---------------------------------------------------------------------------
// Synthetic motion corpus

MotionFamily make_motion_family(const SyntheticConfig &cfg, int cls) {
  MotionFamily fam;
  fam.joints = cfg.joints;
  const auto n = std::size_t(cfg.joints) * 3;
  fam.rest.resize(n);
  fam.amplitude.resize(n);
  fam.phase.resize(n);
  fam.frequency.resize(cfg.joints);

  // Rest pose is shared by every class so only the motion carries the label.
  Rng body(mix_seed(cfg.seed, 0xb0d7));
  std::uniform_real_distribution<double> ux(-0.5, 0.5), uy(0.0, 1.6), uz(-0.25, 0.25);
  for (int j = 0; j < cfg.joints; ++j) {
    fam.rest[j * 3 + 0] = ux(body);
    fam.rest[j * 3 + 1] = uy(body);
    fam.rest[j * 3 + 2] = uz(body);
  }

  Rng rng(mix_seed(cfg.seed, 0xc1a55 + static_cast<std::uint64_t>(cls)));
  std::uniform_real_distribution<double> amp(0.05, 0.35), ph(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(1, 3);
  for (int j = 0; j < cfg.joints; ++j) {
    fam.frequency[j] = freq(rng);
    for (int a = 0; a < 3; ++a) {
      fam.amplitude[j * 3 + a] = amp(rng);
      fam.phase[j * 3 + a] = ph(rng);
    }
  }
  return fam;
}

Frames synthesize_motion(const MotionFamily &family, int frames, double rotation, double speed,
                         double noise_scale, Rng &rng) {
  Frames out(frames, family.joints);
  const double c = std::cos(rotation), s = std::sin(rotation);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int t = 0; t < frames; ++t) {
    const double tau = speed * static_cast<double>(t) / static_cast<double>(frames - 1);
    for (int j = 0; j < family.joints; ++j) {
      double p[3];
      for (int a = 0; a < 3; ++a) {
        const std::size_t k = std::size_t(j) * 3 + a;
        p[a] = family.rest[k] +
               family.amplitude[k] * std::sin(two_pi * family.frequency[j] * tau + family.phase[k]);
      }
      out.at(t, j, 0) = c * p[0] + s * p[2];
      out.at(t, j, 1) = p[1];
      out.at(t, j, 2) = -s * p[0] + c * p[2];
    }
  }
  if (noise_scale > 0.0)
    for (double &v : out.data()) v += noise_scale * noise(rng);
  return out;
}

std::vector<SkeletonSequence> generate_synthetic(const SyntheticConfig &cfg) {
  cfg.validate();
  std::vector<MotionFamily> families;
  for (int c = 0; c < cfg.classes; ++c) families.push_back(make_motion_family(cfg, c));

  Rng rng(mix_seed(cfg.seed, 0x5a3b1e));
  std::uniform_real_distribution<double> rot(-std::numbers::pi, std::numbers::pi);
  std::uniform_real_distribution<double> speed(0.8, 1.25);
  const int total = cfg.classes * cfg.samples_per_class;
  std::vector<SkeletonSequence> out;
  out.reserve(total);
  for (int i = 0; i < total; ++i) {
    const int label = i % cfg.classes;
    const double r = rot(rng);
    const double v = speed(rng);
    SkeletonSequence seq;
    seq.id = "syn" + std::to_string(i);
    seq.label = label;
    seq.frames = synthesize_motion(families[label], cfg.frames, r, v, cfg.noise_scale, rng);
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace assl
