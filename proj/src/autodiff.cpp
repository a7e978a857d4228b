// SPDX-License-Identifier: Apache-2.0
#include "assl/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace assl::ad {

namespace {

void require(bool ok, const char *op, const Matrix &a, const Matrix &b) {
  if (ok) return;
  std::ostringstream os;
  os << op << ": shape mismatch (" << a.rows() << "x" << a.cols() << " vs "
     << b.rows() << "x" << b.cols() << ")";
  throw std::invalid_argument(os.str());
}

void require(bool ok, const std::string &what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

const Matrix &Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix &v = value();
  require(v.rows() == 1 && v.cols() == 1, "scalar(): node is not 1x1");
  return v(0, 0);
}

Var Tape::push(Matrix value, bool requires_grad, Backward fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::variable(Matrix value) { return push(std::move(value), true, {}); }

Var Tape::bind(const Parameter &p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  const bool trainable = !frozen_.contains(&p);
  Var v = push(p.value, trainable, {});
  bound_.emplace(&p, v.id());
  return v;
}

void Tape::freeze(std::span<const Parameter *const> params) {
  for (const Parameter *p : params) frozen_.insert(p);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward fn) {
  bool rg = false;
  for (const Var &v : inputs) {
    if (v.tape_ != this) throw std::invalid_argument("record: input from another tape");
    rg = rg || nodes_[v.id_].requires_grad;
  }
  return push(std::move(value), rg, std::move(fn));
}

void Tape::backward(Var root) {
  require(root.tape_ == this, "backward: root from another tape");
  const Matrix &rv = value(root);
  require(rv.rows() == 1 && rv.cols() == 1, "backward: root must be 1x1");
  for (Node &n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  Node &r = nodes_[root.id_];
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);
  r.has_grad = true;
  for (int id = root.id_; id >= 0; --id) {
    Node &n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this, id);
  }
}

Matrix Tape::grad(Var v) const {
  const Node &n = nodes_[v.id_];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix Tape::grad(const Parameter &p) const {
  auto it = bound_.find(&p);
  if (it == bound_.end()) return Matrix::Zero(p.value.rows(), p.value.cols());
  return grad(Var(const_cast<Tape *>(this), it->second));
}

std::vector<Matrix> Tape::gradients(std::span<const Parameter *const> params) const {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const Parameter *p : params) out.push_back(grad(*p));
  return out;
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Matrix &av = a.value(), &bv = b.value();
  require(av.cols() == bv.rows(), "matmul", av, bv);
  Matrix out = av * bv;
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  const Matrix &av = a.value(), &bv = b.value();
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add", av, bv);
  int ia = a.id(), ib = b.id();
  return a.tape().record(av + bv, {a, b}, [ia, ib](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  const Matrix &av = a.value(), &bv = b.value();
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub", av, bv);
  int ia = a.id(), ib = b.id();
  return a.tape().record(av - bv, {a, b}, [ia, ib](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  const Matrix &av = a.value(), &bv = b.value();
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "mul", av, bv);
  int ia = a.id(), ib = b.id();
  return a.tape().record(av.cwiseProduct(bv), {a, b}, [ia, ib](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  int ia = a.id();
  return a.tape().record(a.value() * s, {a}, [ia, s](Tape &t, int self) {
    t.accumulate(ia, t.upstream(self) * s);
  });
}

Var add_scalar(Var a, double s) {
  int ia = a.id();
  Matrix out = a.value().array() + s;
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    t.accumulate(ia, t.upstream(self));
  });
}

Var add_bias(Var x, Var b) {
  const Matrix &xv = x.value(), &bv = b.value();
  require(bv.cols() == 1 && bv.rows() == xv.rows(), "add_bias", xv, bv);
  Matrix out = xv.colwise() + bv.col(0);
  int ix = x.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, b}, [ix, ib](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.rowwise().sum());
  });
}

Var mul_row_broadcast(Var a, Var w) {
  const Matrix &av = a.value(), &wv = w.value();
  require(wv.rows() == 1 && wv.cols() == av.cols(), "mul_row_broadcast", av, wv);
  Matrix out = av * wv.row(0).asDiagonal();
  int ia = a.id(), iw = w.id();
  return a.tape().record(std::move(out), {a, w}, [ia, iw](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(iw).row(0).asDiagonal());
    if (t.requires_grad(iw))
      t.accumulate(iw, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

Var sigmoid(Var a) {
  Matrix out = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &y = t.value(self);
    t.accumulate(ia, t.upstream(self).cwiseProduct(
                         (y.array() * (1.0 - y.array())).matrix()));
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &y = t.value(self);
    t.accumulate(ia, t.upstream(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &x = t.value(ia);
    t.accumulate(ia, (x.array() > 0.0).select(t.upstream(self), 0.0).matrix());
  });
}

Var leaky_relu(Var a, double slope) {
  const Matrix &x = a.value();
  Matrix out = (x.array() > 0.0).select(x, x * slope);
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, slope](Tape &t, int self) {
    const Matrix &xv = t.value(ia);
    const Matrix &g = t.upstream(self);
    t.accumulate(ia, (xv.array() > 0.0).select(g, g * slope).matrix());
  });
}

Var abs(Var a) {
  Matrix out = a.value().cwiseAbs();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &x = t.value(ia);
    t.accumulate(ia, t.upstream(self).cwiseProduct(x.cwiseSign()));
  });
}

Var exp(Var a) {
  Matrix out = a.value().array().exp().matrix();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    t.accumulate(ia, t.upstream(self).cwiseProduct(t.value(self)));
  });
}

Var square(Var a) {
  Matrix out = a.value().array().square().matrix();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    t.accumulate(ia, 2.0 * t.upstream(self).cwiseProduct(t.value(ia)));
  });
}

Var log_floor(Var a, double floor) {
  Matrix out = a.value().cwiseMax(floor).array().log().matrix();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, floor](Tape &t, int self) {
    const Matrix &x = t.value(ia);
    const Matrix &g = t.upstream(self);
    t.accumulate(ia, (x.array() > floor).select(g.array() / x.array(), 0.0).matrix());
  });
}

Var clamp(Var a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, lo, hi](Tape &t, int self) {
    const Matrix &x = t.value(ia);
    const Matrix &g = t.upstream(self);
    t.accumulate(ia, (x.array() >= lo && x.array() <= hi).select(g, 0.0).matrix());
  });
}

Var stop_gradient(Var a) { return a.tape().constant(a.value()); }

Var softmax_cols(Var a) {
  const Matrix &x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double m = x.col(j).maxCoeff();
    out.col(j) = (x.col(j).array() - m).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &y = t.value(self);
    const Matrix &g = t.upstream(self);
    const Eigen::RowVectorXd dots = g.cwiseProduct(y).colwise().sum();
    t.accumulate(ia, y.cwiseProduct(g - Matrix::Ones(y.rows(), 1) * dots));
  });
}

Var group_softmax(Var a, Eigen::Index group) {
  const Matrix &x = a.value();
  require(group > 0 && x.cols() % group == 0, "group_softmax: columns not divisible by group");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index s = 0; s < x.cols(); s += group) {
      auto xs = x.row(r).segment(s, group);
      const double m = xs.maxCoeff();
      auto ys = out.row(r).segment(s, group);
      ys = (xs.array() - m).exp().matrix();
      ys /= ys.sum();
    }
  }
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, group](Tape &t, int self) {
    const Matrix &y = t.value(self);
    const Matrix &g = t.upstream(self);
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      for (Eigen::Index s = 0; s < y.cols(); s += group) {
        auto ys = y.row(r).segment(s, group);
        auto gs = g.row(r).segment(s, group);
        const double dot = gs.dot(ys);
        dx.row(r).segment(s, group) = ys.cwiseProduct((gs.array() - dot).matrix());
      }
    }
    t.accumulate(ia, dx);
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &x = t.value(ia);
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.upstream(self)(0, 0)));
  });
}

Var mean(Var a) {
  const Matrix &x = a.value();
  require(x.size() > 0, "mean: empty input");
  Matrix out(1, 1);
  out(0, 0) = x.mean();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &xv = t.value(ia);
    const double g = t.upstream(self)(0, 0) / static_cast<double>(xv.size());
    t.accumulate(ia, Matrix::Constant(xv.rows(), xv.cols(), g));
  });
}

Var sum_rows(Var a) {
  Matrix out = a.value().colwise().sum();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape &t, int self) {
    const Matrix &x = t.value(ia);
    t.accumulate(ia, Matrix::Ones(x.rows(), 1) * t.upstream(self));
  });
}

Var group_sum_cols(Var a, Eigen::Index group) {
  const Matrix &x = a.value();
  require(group > 0 && x.cols() % group == 0, "group_sum_cols: columns not divisible by group");
  const Eigen::Index n = x.cols() / group;
  Matrix out = Matrix::Zero(x.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) out.col(j) = x.middleCols(j * group, group).rowwise().sum();
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, group, n](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    Matrix dx(g.rows(), n * group);
    for (Eigen::Index j = 0; j < n; ++j) dx.middleCols(j * group, group).colwise() = g.col(j);
    t.accumulate(ia, dx);
  });
}

Var repeat_cols(Var a, Eigen::Index times) {
  const Matrix &x = a.value();
  require(times > 0, "repeat_cols: times must be positive");
  Matrix out(x.rows(), x.cols() * times);
  for (Eigen::Index j = 0; j < x.cols(); ++j) out.middleCols(j * times, times).colwise() = x.col(j);
  int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, times](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    const Eigen::Index n = g.cols() / times;
    Matrix dx(g.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) dx.col(j) = g.middleCols(j * times, times).rowwise().sum();
    t.accumulate(ia, dx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var &p : parts) {
    require(p.cols() == cols, "concat_rows", parts[0].value(), p.value());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var &p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts[0].tape().record(std::move(out), parts, [spans](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    for (const auto &[id, start] : spans)
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var &p : parts) {
    require(p.rows() == rows, "concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var &p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return parts[0].tape().record(std::move(out), parts, [spans](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    for (const auto &[id, start] : spans)
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix &x = a.value();
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows: out of range");
  int ia = a.id();
  return a.tape().record(x.middleRows(start, count), {a}, [ia, start](Tape &t, int self) {
    t.accumulate_block(ia, start, 0, t.upstream(self));
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix &x = a.value();
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: out of range");
  int ia = a.id();
  return a.tape().record(x.middleCols(start, count), {a}, [ia, start](Tape &t, int self) {
    t.accumulate_block(ia, 0, start, t.upstream(self));
  });
}

Var gather_cols(Var a, std::span<const Eigen::Index> indices) {
  const Matrix &x = a.value();
  Matrix out(x.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < x.cols(), "gather_cols: index out of range");
    out.col(static_cast<Eigen::Index>(i)) = x.col(indices[i]);
  }
  int ia = a.id();
  std::vector<Eigen::Index> idx(indices.begin(), indices.end());
  return a.tape().record(std::move(out), {a}, [ia, idx = std::move(idx)](Tape &t, int self) {
    const Matrix &g = t.upstream(self);
    Matrix dx = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.col(idx[i]) += g.col(static_cast<Eigen::Index>(i));
    t.accumulate(ia, dx);
  });
}

Var gru_cell(Var gi, Var gh, Var h) {
  const Matrix &giv = gi.value(), &ghv = gh.value(), &hv = h.value();
  const Eigen::Index H = hv.rows();
  require(giv.rows() == 3 * H && ghv.rows() == 3 * H && giv.cols() == hv.cols() &&
              ghv.cols() == hv.cols(),
          "gru_cell: expected 3H x B gate blocks for an H x B state");
  auto sig = [](const auto &x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); };
  Matrix r = sig(giv.topRows(H) + ghv.topRows(H));
  Matrix z = sig(giv.middleRows(H, H) + ghv.middleRows(H, H));
  Matrix hn = ghv.bottomRows(H);
  Matrix n = (giv.bottomRows(H) + r.cwiseProduct(hn)).array().tanh().matrix();
  Matrix out = n + z.cwiseProduct(hv - n);
  int igi = gi.id(), igh = gh.id(), ih = h.id();
  return gi.tape().record(
      std::move(out), {gi, gh, h},
      [igi, igh, ih, H, r = std::move(r), z = std::move(z), n = std::move(n),
       hn = std::move(hn)](Tape &t, int self) {
        const Matrix &g = t.upstream(self);
        const Matrix &hprev = t.value(ih);
        Matrix dn = g.cwiseProduct((1.0 - z.array()).matrix());
        Matrix dz = g.cwiseProduct(hprev - n);
        Matrix dan = dn.cwiseProduct((1.0 - n.array().square()).matrix());
        Matrix dr = dan.cwiseProduct(hn);
        Matrix dar = dr.cwiseProduct((r.array() * (1.0 - r.array())).matrix());
        Matrix daz = dz.cwiseProduct((z.array() * (1.0 - z.array())).matrix());
        Matrix dgi(3 * H, g.cols());
        dgi << dar, daz, dan;
        if (t.requires_grad(igi)) t.accumulate(igi, dgi);
        if (t.requires_grad(igh)) {
          dgi.bottomRows(H) = dan.cwiseProduct(r);
          t.accumulate(igh, dgi);
        }
        if (t.requires_grad(ih)) t.accumulate(ih, g.cwiseProduct(z));
      });
}

}  // namespace assl::ad
