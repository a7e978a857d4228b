// SPDX-License-Identifier: Apache-2.0
/**
 * @file   models.hpp
 * @brief  Differentiable components: bidirectional GRU encoder, GRU
 *         inpainting decoder, translation layer, classifier, aggregation
 *         perceptron and discriminator.
 *
 * Batched sequence inputs are (J*3) x (T*B) matrices whose column t*B + b
 * holds frame t of sample b. Feature batches are d x B.
 */
#pragma once

#include "assl/autodiff.hpp"
#include "assl/random.hpp"
#include "assl/skeleton_data.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace assl {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;
using ad::Vector;

inline constexpr int kEncoderLayers = 3;
inline constexpr int kDecoderLayers = 2;
inline constexpr double kLogitClamp = 30.0;
inline constexpr double kDiscriminatorSlope = 0.2;
inline constexpr int kCheckpointFormatVersion = 1;

struct ModelDims {
  int joints = 25;
  int classes = 60;
  int frames = 40;
  int encoder_hidden = 512;
  int decoder_hidden = 512;
  std::vector<int> classifier_hidden = {256};
  std::vector<int> aggregator_hidden = {256, 64};
  std::vector<int> discriminator_hidden = {512, 256, 64};

  int input_width() const { return joints * 3; }
  /// Forward and backward final states of the top encoder layer, concatenated.
  int feature_width() const { return 2 * encoder_hidden; }

  /// Perceptron widths shrunk in proportion to d = 2 * encoder_hidden
  /// (d/4 for the classifier, d/4, d/16 for the aggregator and d/2, d/4, d/16
  /// for the discriminator), keeping the layer counts.
  static ModelDims scaled(int joints, int classes, int frames, int encoder_hidden,
                          int decoder_hidden);
  void validate() const;
  bool operator==(const ModelDims &) const = default;
};

enum class Activation { relu, leaky_relu };

struct Linear {
  Parameter weight;  // out x in
  Parameter bias;    // out x 1

  static Linear create(const std::string &name, int in, int out, Rng &rng);
  Var forward(Tape &tape, Var x) const;
  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }
};

struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::relu;

  static Mlp create(const std::string &name, int in, std::span<const int> hidden, int out,
                    Activation activation, Rng &rng);
  /// Hidden layers are followed by the activation, the last layer is affine.
  Var forward(Tape &tape, Var x) const;
};

struct GruLayer {
  Parameter w_ih;  // 3H x in, gate order [reset; update; candidate]
  Parameter w_hh;  // 3H x H
  Parameter b_ih;  // 3H x 1
  Parameter b_hh;  // 3H x 1

  static GruLayer create(const std::string &name, int in, int hidden, Rng &rng);
  int hidden() const { return static_cast<int>(w_hh.value.cols()); }
  /// Runs over `steps` time steps of a batched sequence. Returns the H x B
  /// states in time order regardless of direction.
  std::vector<Var> run(Tape &tape, Var inputs, int steps, int batch, bool reverse,
                       std::optional<Var> initial = std::nullopt) const;
};

struct Encoder {
  std::array<GruLayer, kEncoderLayers> forward;
  std::array<GruLayer, kEncoderLayers> backward;
};

struct Decoder {
  Linear init;  // d -> kDecoderLayers * H, initial states
  std::array<GruLayer, kDecoderLayers> layers;
  Linear readout;  // H -> J*3 per step
};

struct ModelBundle {
  ModelDims dims;
  Encoder encoder;
  Decoder decoder;
  Linear translator;
  Mlp classifier;
  Mlp aggregator;
  Mlp discriminator;

  /// Orthogonal recurrent matrices, U(+-sqrt(3/fan_in)) affine weights,
  /// zero biases.
  static ModelBundle create(const ModelDims &dims, std::uint64_t seed);

  /// Parameters grouped by component name (encoder, decoder, translator,
  /// classifier, aggregator, discriminator).
  std::vector<std::pair<std::string, std::vector<Parameter *>>> components();
  std::vector<std::pair<std::string, std::vector<const Parameter *>>> components() const;
  /// Everything except the discriminator.
  std::vector<Parameter *> model_parameters();
  std::vector<Parameter *> discriminator_parameters();
  std::vector<Parameter *> all_parameters();
  std::vector<const Parameter *> all_parameters() const;

  bool all_finite() const;
};

// ---------------------------------------------------------------------------
// Batch packing

Matrix pack_batch(std::span<const Frames *const> batch);
Matrix pack_batch(std::span<const Frames> batch);
Frames unpack_sample(const Matrix &packed, int steps, int batch, int sample, int joints);

// ---------------------------------------------------------------------------
// Tape-level forward maps

/// d x B features. Throws NumericError naming the layer on non-finite output.
Var encode(Tape &tape, const ModelBundle &m, Var inputs, int steps, int batch);
/// (J*3) x (T*B) reconstruction. Decoder states start from an affine map of
/// `features`; step inputs are the masked frames.
Var decode(Tape &tape, const ModelBundle &m, Var features, Var masked, int steps, int batch);
Var translate(Tape &tape, const ModelBundle &m, Var h);
/// Clamped logits, C x B.
Var classifier_logits(Tape &tape, const ModelBundle &m, Var hbar);
/// Softmax of the clamped logits, C x B.
Var classify(Tape &tape, const ModelBundle &m, Var hbar);
/// sigmoid(clamp(logit, +-30)), 1 x B.
Var discriminate(Tape &tape, const ModelBundle &m, Var hbar);
/// Raw aggregation score per column of `diff`, 1 x N.
Var aggregate_score(Tape &tape, const ModelBundle &m, Var diff);

// ---------------------------------------------------------------------------
// Single-sample convenience wrappers (inference only)

Vector encode(const ModelBundle &m, const Frames &x);
Frames decode(const ModelBundle &m, const Vector &h, const Frames &masked);
Vector translate(const ModelBundle &m, const Vector &h);
Vector classify(const ModelBundle &m, const Vector &hbar);
double discriminate(const ModelBundle &m, const Vector &hbar);
double aggregate_score(const ModelBundle &m, const Vector &diff);

/// Translated features (d x N) of prepared inputs, encoded in chunks of
/// `chunk` samples. Column i belongs to seqs[i].
Matrix embed_sequences(const ModelBundle &m, std::span<const SkeletonSequence> seqs, int frames,
                       std::uint64_t seed, int chunk = 64);

// ---------------------------------------------------------------------------
// Checkpoints: `path` holds the binary parameter archive, `path` + ".json"
// the sidecar with dimensions and format version.

void save_checkpoint(const ModelBundle &m, const std::filesystem::path &path);
/// Throws CheckpointError on a missing, truncated or mismatched archive.
ModelBundle load_checkpoint(const std::filesystem::path &path);

}  // namespace assl
