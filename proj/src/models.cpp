// SPDX-License-Identifier: Apache-2.0
#include "assl/models.hpp"

#include "assl/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace assl {

namespace {

Matrix uniform_matrix(int rows, int cols, double bound, Rng &rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Matrix orthogonal_block(int n, Rng &rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ();
  // Sign fix makes the draw uniform over the orthogonal group.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) *= -1.0;
  return q;
}

void check_finite(const Var &v, const std::string &where) {
  if (!v.value().allFinite()) throw NumericError(where + " produced non-finite activations");
}

}  // namespace

// ---------------------------------------------------------------------------

ModelDims ModelDims::scaled(int joints, int classes, int frames, int encoder_hidden,
                            int decoder_hidden) {
  ModelDims d;
  d.joints = joints;
  d.classes = classes;
  d.frames = frames;
  d.encoder_hidden = encoder_hidden;
  d.decoder_hidden = decoder_hidden;
  const int w = 2 * encoder_hidden;
  auto at_least = [](int v) { return std::max(v, 2); };
  d.classifier_hidden = {at_least(w / 4)};
  d.aggregator_hidden = {at_least(w / 4), at_least(w / 16)};
  d.discriminator_hidden = {at_least(w / 2), at_least(w / 4), at_least(w / 16)};
  return d;
}

void ModelDims::validate() const {
  if (joints < 1 || classes < 2 || frames < 1 || encoder_hidden < 1 || decoder_hidden < 1)
    throw ConfigError("model dims: joints, frames, hidden widths must be >= 1 and classes >= 2");
  if (classifier_hidden.size() != 1 || aggregator_hidden.size() != 2 ||
      discriminator_hidden.size() != 3)
    throw ConfigError(
        "model dims: classifier needs 1 hidden width, aggregator 2, discriminator 3");
  auto positive = [](const std::vector<int> &v) {
    return std::all_of(v.begin(), v.end(), [](int x) { return x >= 1; });
  };
  if (!positive(classifier_hidden) || !positive(aggregator_hidden) ||
      !positive(discriminator_hidden))
    throw ConfigError("model dims: perceptron widths must be >= 1");
}

// ---------------------------------------------------------------------------

Linear Linear::create(const std::string &name, int in, int out, Rng &rng) {
  Linear l;
  l.weight = Parameter(name + ".weight", uniform_matrix(out, in, std::sqrt(3.0 / in), rng));
  l.bias = Parameter(name + ".bias", Matrix::Zero(out, 1));
  return l;
}

Var Linear::forward(Tape &tape, Var x) const {
  return ad::add_bias(ad::matmul(tape.bind(weight), x), tape.bind(bias));
}

Mlp Mlp::create(const std::string &name, int in, std::span<const int> hidden, int out,
                Activation activation, Rng &rng) {
  Mlp m;
  m.activation = activation;
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    m.layers.push_back(Linear::create(name + ".layer" + std::to_string(i), prev, hidden[i], rng));
    prev = hidden[i];
  }
  m.layers.push_back(
      Linear::create(name + ".layer" + std::to_string(hidden.size()), prev, out, rng));
  return m;
}

Var Mlp::forward(Tape &tape, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(tape, x);
    if (i + 1 < layers.size())
      x = activation == Activation::relu ? ad::relu(x) : ad::leaky_relu(x, kDiscriminatorSlope);
  }
  return x;
}

GruLayer GruLayer::create(const std::string &name, int in, int hidden, Rng &rng) {
  GruLayer g;
  g.w_ih = Parameter(name + ".w_ih", uniform_matrix(3 * hidden, in, std::sqrt(3.0 / in), rng));
  Matrix whh(3 * hidden, hidden);
  for (int k = 0; k < 3; ++k) whh.middleRows(k * hidden, hidden) = orthogonal_block(hidden, rng);
  g.w_hh = Parameter(name + ".w_hh", std::move(whh));
  g.b_ih = Parameter(name + ".b_ih", Matrix::Zero(3 * hidden, 1));
  g.b_hh = Parameter(name + ".b_hh", Matrix::Zero(3 * hidden, 1));
  return g;
}

std::vector<Var> GruLayer::run(Tape &tape, Var inputs, int steps, int batch, bool reverse,
                               std::optional<Var> initial) const {
  const int H = hidden();
  if (inputs.cols() != static_cast<Eigen::Index>(steps) * batch)
    throw ContractError("GruLayer::run: input columns != steps * batch");
  // Input projections for every step in one product.
  Var gi_all = ad::add_bias(ad::matmul(tape.bind(w_ih), inputs), tape.bind(b_ih));
  Var whh = tape.bind(w_hh);
  Var bhh = tape.bind(b_hh);
  Var h = initial ? *initial : tape.constant(Matrix::Zero(H, batch));
  std::vector<Var> states(steps);
  for (int k = 0; k < steps; ++k) {
    const int t = reverse ? steps - 1 - k : k;
    Var gi = ad::slice_cols(gi_all, static_cast<Eigen::Index>(t) * batch, batch);
    Var gh = ad::add_bias(ad::matmul(whh, h), bhh);
    h = ad::gru_cell(gi, gh, h);
    states[t] = h;
  }
  return states;
}

// ---------------------------------------------------------------------------

ModelBundle ModelBundle::create(const ModelDims &dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(mix_seed(seed, 0x3d31));
  ModelBundle m;
  m.dims = dims;
  const int in = dims.input_width();
  const int H = dims.encoder_hidden;
  const int d = dims.feature_width();
  for (int l = 0; l < kEncoderLayers; ++l) {
    const int lin = l == 0 ? in : 2 * H;
    const std::string p = "encoder.layer" + std::to_string(l);
    m.encoder.forward[l] = GruLayer::create(p + ".forward", lin, H, rng);
    m.encoder.backward[l] = GruLayer::create(p + ".backward", lin, H, rng);
  }
  const int Hd = dims.decoder_hidden;
  m.decoder.init = Linear::create("decoder.init", d, kDecoderLayers * Hd, rng);
  for (int l = 0; l < kDecoderLayers; ++l)
    m.decoder.layers[l] =
        GruLayer::create("decoder.layer" + std::to_string(l), l == 0 ? in : Hd, Hd, rng);
  m.decoder.readout = Linear::create("decoder.readout", Hd, in, rng);
  m.translator = Linear::create("translator", d, d, rng);
  m.classifier = Mlp::create("classifier", d, dims.classifier_hidden, dims.classes,
                             Activation::relu, rng);
  m.aggregator = Mlp::create("aggregator", d, dims.aggregator_hidden, 1, Activation::relu, rng);
  m.discriminator = Mlp::create("discriminator", d, dims.discriminator_hidden, 1,
                                Activation::leaky_relu, rng);
  return m;
}

namespace {

template <class P, class B>
std::vector<std::pair<std::string, std::vector<P *>>> collect(B &m) {
  auto gru = [](auto &g, std::vector<P *> &out) {
    out.push_back(&g.w_ih);
    out.push_back(&g.w_hh);
    out.push_back(&g.b_ih);
    out.push_back(&g.b_hh);
  };
  auto lin = [](auto &l, std::vector<P *> &out) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  };
  auto mlp = [&](auto &p) {
    std::vector<P *> out;
    for (auto &l : p.layers) lin(l, out);
    return out;
  };
  std::vector<std::pair<std::string, std::vector<P *>>> groups;
  std::vector<P *> enc;
  for (int l = 0; l < kEncoderLayers; ++l) {
    gru(m.encoder.forward[l], enc);
    gru(m.encoder.backward[l], enc);
  }
  groups.emplace_back("encoder", std::move(enc));
  std::vector<P *> dec;
  lin(m.decoder.init, dec);
  for (auto &g : m.decoder.layers) gru(g, dec);
  lin(m.decoder.readout, dec);
  groups.emplace_back("decoder", std::move(dec));
  std::vector<P *> tr;
  lin(m.translator, tr);
  groups.emplace_back("translator", std::move(tr));
  groups.emplace_back("classifier", mlp(m.classifier));
  groups.emplace_back("aggregator", mlp(m.aggregator));
  groups.emplace_back("discriminator", mlp(m.discriminator));
  return groups;
}

}  // namespace

std::vector<std::pair<std::string, std::vector<Parameter *>>> ModelBundle::components() {
  return collect<Parameter>(*this);
}

std::vector<std::pair<std::string, std::vector<const Parameter *>>> ModelBundle::components()
    const {
  return collect<const Parameter>(*this);
}

std::vector<Parameter *> ModelBundle::model_parameters() {
  std::vector<Parameter *> out;
  for (auto &[name, ps] : components())
    if (name != "discriminator") out.insert(out.end(), ps.begin(), ps.end());
  return out;
}

std::vector<Parameter *> ModelBundle::discriminator_parameters() {
  for (auto &[name, ps] : components())
    if (name == "discriminator") return ps;
  return {};
}

std::vector<Parameter *> ModelBundle::all_parameters() {
  std::vector<Parameter *> out;
  for (auto &[name, ps] : components()) out.insert(out.end(), ps.begin(), ps.end());
  return out;
}

std::vector<const Parameter *> ModelBundle::all_parameters() const {
  std::vector<const Parameter *> out;
  for (auto &[name, ps] : components()) out.insert(out.end(), ps.begin(), ps.end());
  return out;
}

bool ModelBundle::all_finite() const {
  for (const Parameter *p : all_parameters())
    if (!p->value.allFinite()) return false;
  return true;
}

// ---------------------------------------------------------------------------

Matrix pack_batch(std::span<const Frames *const> batch) {
  if (batch.empty()) throw ContractError("pack_batch: empty batch");
  const int T = batch[0]->frames(), W = batch[0]->width();
  const auto B = static_cast<Eigen::Index>(batch.size());
  Matrix out(W, static_cast<Eigen::Index>(T) * B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Frames &f = *batch[b];
    if (f.frames() != T || f.width() != W)
      throw ContractError("pack_batch: samples differ in shape");
    for (int t = 0; t < T; ++t)
      out.col(t * B + b) = Eigen::Map<const Vector>(f.frame(t).data(), W);
  }
  return out;
}

Matrix pack_batch(std::span<const Frames> batch) {
  std::vector<const Frames *> ptrs;
  for (const Frames &f : batch) ptrs.push_back(&f);
  return pack_batch(std::span<const Frames *const>(ptrs));
}

Frames unpack_sample(const Matrix &packed, int steps, int batch, int sample, int joints) {
  Frames out(steps, joints);
  for (int t = 0; t < steps; ++t)
    Eigen::Map<Vector>(out.frame(t).data(), joints * 3) = packed.col(t * batch + sample);
  return out;
}

// ---------------------------------------------------------------------------

Var encode(Tape &tape, const ModelBundle &m, Var inputs, int steps, int batch) {
  if (inputs.rows() != m.dims.input_width())
    throw ContractError("encode: input width " + std::to_string(inputs.rows()) +
                        " != J*3 = " + std::to_string(m.dims.input_width()));
  Var seq = inputs;
  std::vector<Var> fwd, bwd;
  for (int l = 0; l < kEncoderLayers; ++l) {
    fwd = m.encoder.forward[l].run(tape, seq, steps, batch, false);
    bwd = m.encoder.backward[l].run(tape, seq, steps, batch, true);
    check_finite(fwd.back(), "encoder layer " + std::to_string(l) + " (forward)");
    check_finite(bwd.front(), "encoder layer " + std::to_string(l) + " (backward)");
    if (l + 1 < kEncoderLayers) {
      std::vector<Var> cols(steps);
      for (int t = 0; t < steps; ++t) {
        const Var both[2] = {fwd[t], bwd[t]};
        cols[t] = ad::concat_rows(both);
      }
      seq = ad::concat_cols(cols);
    }
  }
  const Var last[2] = {fwd.back(), bwd.front()};
  return ad::concat_rows(last);
}

Var decode(Tape &tape, const ModelBundle &m, Var features, Var masked, int steps, int batch) {
  const int Hd = m.dims.decoder_hidden;
  Var init = m.decoder.init.forward(tape, features);
  Var seq = masked;
  std::vector<Var> states;
  for (int l = 0; l < kDecoderLayers; ++l) {
    Var h0 = ad::slice_rows(init, static_cast<Eigen::Index>(l) * Hd, Hd);
    states = m.decoder.layers[l].run(tape, seq, steps, batch, false, h0);
    check_finite(states.back(), "decoder layer " + std::to_string(l));
    seq = ad::concat_cols(states);
  }
  Var out = m.decoder.readout.forward(tape, seq);
  check_finite(out, "decoder readout");
  return out;
}

Var translate(Tape &tape, const ModelBundle &m, Var h) { return m.translator.forward(tape, h); }

Var classifier_logits(Tape &tape, const ModelBundle &m, Var hbar) {
  return ad::clamp(m.classifier.forward(tape, hbar), -kLogitClamp, kLogitClamp);
}

Var classify(Tape &tape, const ModelBundle &m, Var hbar) {
  return ad::softmax_cols(classifier_logits(tape, m, hbar));
}

Var discriminate(Tape &tape, const ModelBundle &m, Var hbar) {
  return ad::sigmoid(
      ad::clamp(m.discriminator.forward(tape, hbar), -kLogitClamp, kLogitClamp));
}

Var aggregate_score(Tape &tape, const ModelBundle &m, Var diff) {
  return m.aggregator.forward(tape, diff);
}

// ---------------------------------------------------------------------------

Vector encode(const ModelBundle &m, const Frames &x) {
  Tape tape(false);
  const Frames *one[1] = {&x};
  Var h = encode(tape, m, tape.constant(pack_batch(std::span<const Frames *const>(one))),
                 x.frames(), 1);
  return h.value().col(0);
}

Frames decode(const ModelBundle &m, const Vector &h, const Frames &masked) {
  Tape tape(false);
  const Frames *one[1] = {&masked};
  Var out = decode(tape, m, tape.constant(h),
                   tape.constant(pack_batch(std::span<const Frames *const>(one))),
                   masked.frames(), 1);
  return unpack_sample(out.value(), masked.frames(), 1, 0, masked.joints());
}

Vector translate(const ModelBundle &m, const Vector &h) {
  Tape tape(false);
  return translate(tape, m, tape.constant(h)).value().col(0);
}

Vector classify(const ModelBundle &m, const Vector &hbar) {
  Tape tape(false);
  return classify(tape, m, tape.constant(hbar)).value().col(0);
}

double discriminate(const ModelBundle &m, const Vector &hbar) {
  Tape tape(false);
  return discriminate(tape, m, tape.constant(hbar)).value()(0, 0);
}

double aggregate_score(const ModelBundle &m, const Vector &diff) {
  Tape tape(false);
  return aggregate_score(tape, m, tape.constant(diff)).value()(0, 0);
}

Matrix embed_sequences(const ModelBundle &m, std::span<const SkeletonSequence> seqs, int frames,
                       std::uint64_t seed, int chunk) {
  Matrix out(m.dims.feature_width(), static_cast<Eigen::Index>(seqs.size()));
  for (std::size_t start = 0; start < seqs.size(); start += chunk) {
    const std::size_t n = std::min<std::size_t>(chunk, seqs.size() - start);
    std::vector<Frames> inputs;
    inputs.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      inputs.push_back(prepare_input(seqs[start + i], frames, seed));
    Tape tape(false);
    Var h = encode(tape, m, tape.constant(pack_batch(std::span<const Frames>(inputs))), frames,
                   static_cast<int>(n));
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        translate(tape, m, h).value();
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'A', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};

std::filesystem::path sidecar_path(const std::filesystem::path &p) {
  return std::filesystem::path(p.string() + ".json");
}

template <class T>
void put(std::ofstream &out, const T &v) {
  out.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream &in, const std::string &what) {
  T v{};
  if (!in.read(reinterpret_cast<char *>(&v), sizeof(T)))
    throw CheckpointError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace

void save_checkpoint(const ModelBundle &m, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointFormatVersion);
  const auto params = m.all_parameters();
  put<std::uint64_t>(out, params.size());
  for (const Parameter *p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::int64_t>(out, p->value.rows());
    put<std::int64_t>(out, p->value.cols());
    out.write(reinterpret_cast<const char *>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!out) throw Error("write failed for checkpoint '" + path.string() + "'");

  const ModelDims &d = m.dims;
  nlohmann::json side = {
      {"format_version", kCheckpointFormatVersion},
      {"d", d.feature_width()},
      {"C", d.classes},
      {"J", d.joints},
      {"T", d.frames},
      {"encoder_layers", kEncoderLayers},
      {"decoder_layers", kDecoderLayers},
      {"encoder_hidden", d.encoder_hidden},
      {"decoder_hidden", d.decoder_hidden},
      {"classifier_hidden", d.classifier_hidden},
      {"aggregator_hidden", d.aggregator_hidden},
      {"discriminator_hidden", d.discriminator_hidden},
  };
  std::ofstream js(sidecar_path(path));
  if (!js) throw Error("cannot write checkpoint sidecar for '" + path.string() + "'");
  js << side.dump(2) << '\n';
}

ModelBundle load_checkpoint(const std::filesystem::path &path) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw CheckpointError("missing checkpoint sidecar '" + sidecar_path(path).string() + "'");
  ModelDims d;
  try {
    nlohmann::json side = nlohmann::json::parse(js);
    if (side.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw CheckpointError("unsupported checkpoint format_version");
    if (side.at("encoder_layers").get<int>() != kEncoderLayers ||
        side.at("decoder_layers").get<int>() != kDecoderLayers)
      throw CheckpointError("checkpoint layer counts do not match this build");
    d.classes = side.at("C").get<int>();
    d.joints = side.at("J").get<int>();
    d.frames = side.at("T").get<int>();
    d.encoder_hidden = side.at("encoder_hidden").get<int>();
    d.decoder_hidden = side.at("decoder_hidden").get<int>();
    d.classifier_hidden = side.at("classifier_hidden").get<std::vector<int>>();
    d.aggregator_hidden = side.at("aggregator_hidden").get<std::vector<int>>();
    d.discriminator_hidden = side.at("discriminator_hidden").get<std::vector<int>>();
    if (side.at("d").get<int>() != d.feature_width())
      throw CheckpointError("sidecar d disagrees with encoder_hidden");
    d.validate();
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(std::string("malformed checkpoint sidecar: ") + e.what());
  } catch (const ConfigError &e) {
    throw CheckpointError(std::string("invalid checkpoint dims: ") + e.what());
  }

  ModelBundle m = ModelBundle::create(d, 0);
  std::unordered_map<std::string, Parameter *> by_name;
  for (Parameter *p : m.all_parameters()) by_name[p->name] = p;

  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint archive '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw CheckpointError("not a checkpoint archive (bad magic)");
  if (get<std::uint32_t>(in, "version") != kCheckpointFormatVersion)
    throw CheckpointError("unsupported checkpoint archive version");
  const auto count = get<std::uint64_t>(in, "entry count");
  if (count != by_name.size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, "name length");
    if (len > 4096) throw CheckpointError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("checkpoint truncated in entry name");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unknown checkpoint entry '" + name + "'");
    const auto rows = get<std::int64_t>(in, name + " rows");
    const auto cols = get<std::int64_t>(in, name + " cols");
    Matrix &v = it->second->value;
    if (rows != v.rows() || cols != v.cols())
      throw CheckpointError("shape mismatch for checkpoint entry '" + name + "'");
    if (!in.read(reinterpret_cast<char *>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double))))
      throw CheckpointError("checkpoint truncated in entry '" + name + "'");
    by_name.erase(it);
  }
  if (!m.all_finite()) throw CheckpointError("checkpoint contains non-finite parameters");
  return m;
}

}  // namespace assl
