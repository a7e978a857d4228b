// SPDX-License-Identifier: Apache-2.0
/**
 * @file   skeleton_data.hpp
 * @brief  Skeleton sequences, dataset I/O, stratified splitting, frame
 *         sampling, inpainting masks and the synthetic motion generator.
 */
#pragma once

#include "assl/random.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace assl {

/// Dense (T, J, 3) array of joint coordinates, row-major in (t, j, axis).
class Frames {
 public:
  Frames() = default;
  Frames(int frames, int joints);
  Frames(int frames, int joints, std::vector<double> coords);

  int frames() const { return frames_; }
  int joints() const { return joints_; }
  /// Values per frame (J * 3).
  int width() const { return joints_ * 3; }

  double &at(int t, int j, int axis) { return data_[index(t, j, axis)]; }
  double at(int t, int j, int axis) const { return data_[index(t, j, axis)]; }
  std::span<double> frame(int t) { return {data_.data() + std::size_t(t) * width(), std::size_t(width())}; }
  std::span<const double> frame(int t) const {
    return {data_.data() + std::size_t(t) * width(), std::size_t(width())};
  }
  const std::vector<double> &data() const { return data_; }
  std::vector<double> &data() { return data_; }

  bool all_finite() const;
  bool operator==(const Frames &) const = default;

 private:
  std::size_t index(int t, int j, int axis) const {
    return (std::size_t(t) * joints_ + j) * 3 + axis;
  }

  int frames_ = 0;
  int joints_ = 0;
  std::vector<double> data_;
};

struct SkeletonSequence {
  std::string id;
  Frames frames;
  std::optional<int> label;

  /// Throws SchemaError unless T_raw >= 2, J >= 1, coordinates finite and,
  /// when classes > 0, the label is in [0, classes).
  void validate(int classes = 0) const;
};

/// Ground truth of the unlabeled pool. Only evaluation code (neighbor
/// quality, embedding export) reads it; training never does.
class EvaluationLabels {
 public:
  void set(const std::string &id, int label) { labels_[id] = label; }
  std::optional<int> find(const std::string &id) const;
  int at(const std::string &id) const;
  std::size_t size() const { return labels_.size(); }

 private:
  std::unordered_map<std::string, int> labels_;
};

class DatasetSplit {
 public:
  DatasetSplit() = default;
  /// Builds a split from explicit pools. Labels of `unlabeled` are moved into
  /// the evaluation-only store and cleared on the training copies.
  DatasetSplit(std::vector<SkeletonSequence> labeled, std::vector<SkeletonSequence> unlabeled,
               std::vector<SkeletonSequence> test, double fraction, int classes);

  const std::vector<SkeletonSequence> &labeled() const { return labeled_; }
  const std::vector<SkeletonSequence> &unlabeled() const { return unlabeled_; }
  const std::vector<SkeletonSequence> &test() const { return test_; }
  double fraction() const { return fraction_; }
  int classes() const { return classes_; }

  const EvaluationLabels &evaluation_labels() const { return hidden_; }

  /// Replaces the labeled pool (pseudo-labelling).
  void set_labeled(std::vector<SkeletonSequence> labeled) { labeled_ = std::move(labeled); }

 private:
  std::vector<SkeletonSequence> labeled_;
  std::vector<SkeletonSequence> unlabeled_;
  std::vector<SkeletonSequence> test_;
  double fraction_ = 0.0;
  int classes_ = 0;
  EvaluationLabels hidden_;
};

struct MaskSpec {
  int start = 0;
  int length = 1;

  /// Throws ContractError unless 0 <= start, length >= 1, start + length <= T.
  void validate(int frames) const;
  bool operator==(const MaskSpec &) const = default;
};

struct SyntheticConfig {
  int classes = 6;
  int joints = 8;
  int frames = 60;
  int samples_per_class = 150;
  double noise_scale = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Class-level trajectory parameters: per joint/axis sinusoids around a
/// shared rest pose.
struct MotionFamily {
  int joints = 0;
  std::vector<double> rest;       // J * 3
  std::vector<double> amplitude;  // J * 3
  std::vector<double> phase;      // J * 3
  std::vector<double> frequency;  // J, cycles per sequence at speed 1
};

// ---------------------------------------------------------------------------

/// Reads a JSON-lines dataset. Throws ParseError (with line number) on
/// malformed records and SchemaError on inconsistent joint counts.
std::vector<SkeletonSequence> load_dataset(const std::filesystem::path &path);
void write_dataset(const std::filesystem::path &path, std::span<const SkeletonSequence> data);

/// Number of classes implied by the labels (max label + 1).
int count_classes(std::span<const SkeletonSequence> data);

/// Stratified split: per class, round(test_fraction * n_c) samples go to the
/// test set, then round(fraction * n_train) of the rest are labeled and the
/// remainder is unlabeled. Throws SplitError when a class would get no label.
DatasetSplit make_split(std::span<const SkeletonSequence> data, double fraction,
                        std::uint64_t seed, double test_fraction = 0.0);

/// Sorted frame indices for sample_frames.
std::vector<int> sample_frame_indices(int raw_frames, int frames, std::uint64_t seed);
/// Uniformly random size-T frame subset in temporal order; short sequences
/// are cyclically tiled first.
Frames sample_frames(const Frames &x, int frames, std::uint64_t seed);

/// Translates the whole sequence so the joint centroid of frame 0 is the origin.
Frames center_on_first_frame(const Frames &x);

/// Per-sample frame-sampling seed, stable across runs and platforms.
std::uint64_t sample_seed(std::uint64_t seed, const std::string &id);
/// Model input for a sequence: centered on frame 0, then T frames sampled.
Frames prepare_input(const SkeletonSequence &seq, int frames, std::uint64_t seed);

/// Zero-fills frames [start, start + length). The input is not modified.
Frames apply_mask(const Frames &x, const MaskSpec &m);
/// One contiguous span of max(1, round(fraction * T)) frames at a uniform offset.
MaskSpec random_mask(int frames, double fraction, Rng &rng);

MotionFamily make_motion_family(const SyntheticConfig &cfg, int cls);
/// Renders one sample: family trajectory at `speed`, rotated by `rotation`
/// radians about the vertical (y) axis, plus N(0, noise_scale^2) noise.
Frames synthesize_motion(const MotionFamily &family, int frames, double rotation, double speed,
                         double noise_scale, Rng &rng);
/// Round-robin labels; each sample draws rotation, speed in [0.8, 1.25] and noise.
std::vector<SkeletonSequence> generate_synthetic(const SyntheticConfig &cfg);

}  // namespace assl
