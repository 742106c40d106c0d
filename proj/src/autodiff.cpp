#include <harmonia/autodiff.hpp>

#include <harmonia/error.hpp>
#include <harmonia/image.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace harmonia::ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t(1),
                         [](std::int64_t a, int b) { return a * b; });
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(const std::string& name, Shape shape) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  const auto n = numel(shape);
  params_.push_back(Parameter{name, std::move(shape), Array::Zero(n), Array::Zero(n)});
  index_[name] = params_.size() - 1;
  return params_.back();
}

Parameter& ParameterStore::at(const std::string& name) {
  auto* p = find(name);
  if (!p) throw std::out_of_range("unknown parameter " + name);
  return *p;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  const auto* p = find(name);
  if (!p) throw std::out_of_range("unknown parameter " + name);
  return *p;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::int64_t ParameterStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

// ---------------------------------------------------------------------------
// Tape

const Array& Var::value() const { return tape_->node(*this).value; }
const Shape& Var::shape() const { return tape_->node(*this).shape; }
double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw std::invalid_argument("item() on non-scalar " + shape_string(shape()));
  return v[0];
}

const Tape::Node& Tape::node(const Var& v) const {
  if (v.tape_ != this || v.id_ < 0 || std::size_t(v.id_) >= nodes_.size()) {
    throw StateError("variable does not belong to the current tape");
  }
  return nodes_[std::size_t(v.id_)];
}

Var Tape::push(Node node) {
  if (numel(node.shape) != node.value.size()) {
    throw std::logic_error("node value size does not match shape " + shape_string(node.shape));
  }
  nodes_.push_back(std::move(node));
  return Var(this, int(nodes_.size() - 1));
}

Var Tape::constant(Shape shape, Array value) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.shape = p.shape;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::record(Shape shape, Array value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(shape), std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Shape shape, Array value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (node(in).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Var Tape::detach(const Var& v) { return constant(node(v).shape, node(v).value); }

bool Tape::requires_grad(const Var& v) const { return node(v).requires_grad; }

void Tape::accumulate(const Var& v, const Array& grad) {
  auto& n = nodes_[std::size_t(v.id_)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = grad;
  else n.grad += grad;
}

void Tape::backward(const Var& loss) {
  if (nodes_.empty()) throw StateError("backward() called without a recorded forward pass");
  const Node& l = node(loss);
  if (l.value.size() != 1) throw StateError("backward() requires a scalar loss");
  nodes_[std::size_t(loss.id_)].grad = Array::Ones(1);
  for (int i = loss.id_; i >= 0; --i) {
    Node& n = nodes_[std::size_t(i)];
    if (n.grad.size() == 0) continue;
    if (n.param) n.param->grad += n.grad;
    if (n.backward) {
      // Inputs always precede the node, so its gradient is final here.
      const Array g = std::move(n.grad);
      n.backward(*this, g);
    }
  }
  clear();
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_string(a.shape()));
  }
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value() + b.value(), {a, b}, [a, b](Tape& t, const Array& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value() - b.value(), {a, b}, [a, b](Tape& t, const Array& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value() * b.value(), {a, b}, [a, b](Tape& t, const Array& g) {
    t.accumulate(a, g * b.value());
    t.accumulate(b, g * a.value());
  });
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value() * s, {a}, [a, s](Tape& t, const Array& g) { t.accumulate(a, g * s); });
}

Var add_scalar(const Var& a, double s) {
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value() + s, {a}, [a](Tape& t, const Array& g) { t.accumulate(a, g); });
}

Var square(const Var& a) {
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value().square(), {a},
                  [a](Tape& t, const Array& g) { t.accumulate(a, 2.0 * g * a.value()); });
}

Var leaky_relu(const Var& a, double slope) {
  Tape& t = *a.tape();
  Array out = (a.value() > 0).select(a.value(), slope * a.value());
  return t.record(a.shape(), std::move(out), {a}, [a, slope](Tape& t, const Array& g) {
    t.accumulate(a, (a.value() > 0).select(g, slope * g));
  });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var sigmoid(const Var& a) {
  Tape& t = *a.tape();
  Array out = a.value().unaryExpr(&stable_sigmoid);
  Var result;
  result = t.record(a.shape(), out, {a}, [a, out](Tape& t, const Array& g) {
    t.accumulate(a, g * out * (1.0 - out));
  });
  return result;
}

Var softplus(const Var& a) {
  Tape& t = *a.tape();
  return t.record(a.shape(), a.value().unaryExpr(&stable_softplus), {a}, [a](Tape& t, const Array& g) {
    t.accumulate(a, g * a.value().unaryExpr(&stable_sigmoid));
  });
}

Var sum(const Var& a) {
  Tape& t = *a.tape();
  const auto n = a.value().size();
  return t.record({1}, Array::Constant(1, a.value().sum()), {a},
                  [a, n](Tape& t, const Array& g) { t.accumulate(a, Array::Constant(n, g[0])); });
}

Var mean(const Var& a) {
  const auto n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / double(n));
}

Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw std::invalid_argument("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  Tape& t = *a.tape();
  return t.record(std::move(shape), a.value(), {a}, [a](Tape& t, const Array& g) { t.accumulate(a, g); });
}

// ---------------------------------------------------------------------------
// Layers

namespace {

struct ConvGeometry {
  int n, c, h, w, o, k, stride, pad, oh, ow;
};

// Output columns [first, last) whose tap at offset k lands inside [0, size).
struct TapRange {
  int first, last;
};

TapRange tap_range(int size, int out, int stride, int pad, int k) {
  const int lo = pad - k;
  int first = lo <= 0 ? 0 : (lo + stride - 1) / stride;
  int last = (size + pad - k + stride - 1) / stride;
  first = std::min(first, out);
  last = std::clamp(last, first, out);
  return {first, last};
}

// col [C*k*k, oh*ow] from one sample plane [C, H, W].
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const int plane = g.oh * g.ow;
  for (int c = 0; c < g.c; ++c) {
    const double* xc = x + std::ptrdiff_t(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + std::ptrdiff_t((c * g.k + ky) * g.k + kx) * plane;
        const TapRange r = tap_range(g.w, g.ow, g.stride, g.pad, kx);
        for (int y = 0; y < g.oh; ++y) {
          double* dst = row + y * g.ow;
          const int sy = y * g.stride - g.pad + ky;
          if (sy < 0 || sy >= g.h) {
            for (int xo = 0; xo < g.ow; ++xo) dst[xo] = 0.0;
            continue;
          }
          // Padding spans are a pixel or two; plain loops beat memset calls.
          for (int xo = 0; xo < r.first; ++xo) dst[xo] = 0.0;
          for (int xo = r.last; xo < g.ow; ++xo) dst[xo] = 0.0;
          const double* src = xc + std::ptrdiff_t(sy) * g.w - g.pad + kx;
          if (g.stride == 1) {
            std::copy(src + r.first, src + r.last, dst + r.first);
          } else {
            for (int xo = r.first; xo < r.last; ++xo) dst[xo] = src[xo * g.stride];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* dx) {
  const int plane = g.oh * g.ow;
  for (int c = 0; c < g.c; ++c) {
    double* dc = dx + std::ptrdiff_t(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + std::ptrdiff_t((c * g.k + ky) * g.k + kx) * plane;
        const TapRange r = tap_range(g.w, g.ow, g.stride, g.pad, kx);
        for (int y = 0; y < g.oh; ++y) {
          const int sy = y * g.stride - g.pad + ky;
          if (sy < 0 || sy >= g.h) continue;
          const double* src = row + y * g.ow;
          double* dst = dc + std::ptrdiff_t(sy) * g.w - g.pad + kx;
          for (int xo = r.first; xo < r.last; ++xo) dst[xo * g.stride] += src[xo];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3]) {
    throw std::invalid_argument("conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(xs));
  }
  if (b.value().size() != ws[0]) throw std::invalid_argument("conv2d: bias size mismatch");
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.oh < 1 || g.ow < 1) throw std::invalid_argument("conv2d: input too small " + shape_string(xs));

  const int ckk = g.c * g.k * g.k;
  const int plane = g.oh * g.ow;
  Array out(std::int64_t(g.n) * g.o * plane);
  RowMatrix col(ckk, plane);
  ConstMatrixMap wm(w.value().data(), g.o, ckk);
  for (int n = 0; n < g.n; ++n) {
    im2col(x.value().data() + std::ptrdiff_t(n) * g.c * g.h * g.w, g, col.data());
    MatrixMap om(out.data() + std::ptrdiff_t(n) * g.o * plane, g.o, plane);
    om.noalias() = wm * col;
    om.colwise() += b.value().matrix();
  }
  Tape& t = *x.tape();
  return t.record({g.n, g.o, g.oh, g.ow}, std::move(out), {x, w, b}, [x, w, b, g](Tape& t, const Array& grad) {
    const int ckk = g.c * g.k * g.k;
    const int plane = g.oh * g.ow;
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(w);
    ConstMatrixMap wm(w.value().data(), g.o, ckk);
    RowMatrix col(ckk, plane);
    RowMatrix dw = RowMatrix::Zero(g.o, ckk);
    Array db = Array::Zero(g.o);
    Array dx = need_x ? Array::Zero(x.value().size()) : Array();
    RowMatrix dcol(ckk, plane);
    for (int n = 0; n < g.n; ++n) {
      ConstMatrixMap gm(grad.data() + std::ptrdiff_t(n) * g.o * plane, g.o, plane);
      db += gm.rowwise().sum().array();
      if (need_w) {
        im2col(x.value().data() + std::ptrdiff_t(n) * g.c * g.h * g.w, g, col.data());
        dw.noalias() += gm * col.transpose();
      }
      if (need_x) {
        dcol.noalias() = wm.transpose() * gm;
        col2im(dcol.data(), g, dx.data() + std::ptrdiff_t(n) * g.c * g.h * g.w);
      }
    }
    if (need_w) t.accumulate(w, Eigen::Map<const Array>(dw.data(), dw.size()));
    t.accumulate(b, db);
    if (need_x) t.accumulate(x, dx);
  });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  require_rank(x, 4, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: zero target dimension");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h == out_h && w == out_w) return x;
  const auto ty = harmonia::detail::bilinear_axis(h, out_h);
  const auto tx = harmonia::detail::bilinear_axis(w, out_w);
  Array out(std::int64_t(n) * c * out_h * out_w);
  const double* src = x.value().data();
  for (int p = 0; p < n * c; ++p) {
    const double* in = src + std::ptrdiff_t(p) * h * w;
    double* dst = out.data() + std::ptrdiff_t(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const auto& ay = ty[std::size_t(y)];
      for (int xo = 0; xo < out_w; ++xo) {
        const auto& ax = tx[std::size_t(xo)];
        const double top = in[ay.i0 * w + ax.i0] + ax.frac * (in[ay.i0 * w + ax.i1] - in[ay.i0 * w + ax.i0]);
        const double bot = in[ay.i1 * w + ax.i0] + ax.frac * (in[ay.i1 * w + ax.i1] - in[ay.i1 * w + ax.i0]);
        dst[y * out_w + xo] = top + ay.frac * (bot - top);
      }
    }
  }
  Tape& t = *x.tape();
  return t.record({n, c, out_h, out_w}, std::move(out), {x},
                  [x, n, c, h, w, out_h, out_w, ty, tx](Tape& t, const Array& g) {
                    Array dx = Array::Zero(x.value().size());
                    for (int p = 0; p < n * c; ++p) {
                      double* din = dx.data() + std::ptrdiff_t(p) * h * w;
                      const double* go = g.data() + std::ptrdiff_t(p) * out_h * out_w;
                      for (int y = 0; y < out_h; ++y) {
                        const auto& ay = ty[std::size_t(y)];
                        for (int xo = 0; xo < out_w; ++xo) {
                          const auto& ax = tx[std::size_t(xo)];
                          const double v = go[y * out_w + xo];
                          din[ay.i0 * w + ax.i0] += v * (1 - ax.frac) * (1 - ay.frac);
                          din[ay.i0 * w + ax.i1] += v * ax.frac * (1 - ay.frac);
                          din[ay.i1 * w + ax.i0] += v * (1 - ax.frac) * ay.frac;
                          din[ay.i1 * w + ax.i1] += v * ax.frac * ay.frac;
                        }
                      }
                    }
                    t.accumulate(x, dx);
                  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const auto& s0 = xs.front().shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_channels: expected NCHW");
  int channels = 0;
  for (const auto& v : xs) {
    const auto& s = v.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw std::invalid_argument("concat_channels: shape mismatch " + shape_string(s) + " vs " + shape_string(s0));
    }
    channels += s[1];
  }
  const int n = s0[0];
  const std::int64_t plane = std::int64_t(s0[2]) * s0[3];
  Array out(n * channels * plane);
  std::int64_t offset = 0;
  for (int b = 0; b < n; ++b) {
    for (const auto& v : xs) {
      const std::int64_t len = v.shape()[1] * plane;
      out.segment(offset, len) = v.value().segment(b * len, len);
      offset += len;
    }
  }
  Tape& t = *xs.front().tape();
  return t.record({n, channels, s0[2], s0[3]}, std::move(out), xs, [xs, n, plane](Tape& t, const Array& g) {
    std::vector<Array> grads;
    for (const auto& v : xs) grads.emplace_back(v.value().size());
    std::int64_t offset = 0;
    for (int b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::int64_t len = xs[i].shape()[1] * plane;
        grads[i].segment(b * len, len) = g.segment(offset, len);
        offset += len;
      }
    }
    for (std::size_t i = 0; i < xs.size(); ++i) t.accumulate(xs[i], grads[i]);
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.shape()[0], c = x.shape()[1];
  const int plane = x.shape()[2] * x.shape()[3];
  ConstMatrixMap xm(x.value().data(), n * c, plane);
  Array out = xm.rowwise().mean().array();
  Tape& t = *x.tape();
  return t.record({n, c}, std::move(out), {x}, [x, n, c, plane](Tape& t, const Array& g) {
    Array dx(x.value().size());
    for (int i = 0; i < n * c; ++i) dx.segment(std::int64_t(i) * plane, plane).setConstant(g[i] / plane);
    t.accumulate(x, dx);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear weight");
  const int n = x.shape()[0], f = x.shape()[1], o = w.shape()[0];
  if (w.shape()[1] != f || b.value().size() != o) throw std::invalid_argument("linear: shape mismatch");
  Array out(std::int64_t(n) * o);
  MatrixMap om(out.data(), n, o);
  om.noalias() = ConstMatrixMap(x.value().data(), n, f) * ConstMatrixMap(w.value().data(), o, f).transpose();
  om.rowwise() += b.value().matrix().transpose();
  Tape& t = *x.tape();
  return t.record({n, o}, std::move(out), {x, w, b}, [x, w, b, n, f, o](Tape& t, const Array& g) {
    ConstMatrixMap gm(g.data(), n, o);
    if (t.requires_grad(x)) {
      RowMatrix dx = gm * ConstMatrixMap(w.value().data(), o, f);
      t.accumulate(x, Eigen::Map<const Array>(dx.data(), dx.size()));
    }
    if (t.requires_grad(w)) {
      RowMatrix dw = gm.transpose() * ConstMatrixMap(x.value().data(), n, f);
      t.accumulate(w, Eigen::Map<const Array>(dw.data(), dw.size()));
    }
    t.accumulate(b, gm.colwise().sum().array().transpose());
  });
}

Var slice_cols(const Var& x, int begin, int count) {
  require_rank(x, 2, "slice_cols");
  const int n = x.shape()[0], f = x.shape()[1];
  if (begin < 0 || count < 0 || begin + count > f) throw std::invalid_argument("slice_cols: out of range");
  ConstMatrixMap xm(x.value().data(), n, f);
  RowMatrix block = xm.middleCols(begin, count);
  Tape& t = *x.tape();
  return t.record({n, count}, Eigen::Map<const Array>(block.data(), block.size()), {x},
                  [x, n, f, begin, count](Tape& t, const Array& g) {
                    RowMatrix dx = RowMatrix::Zero(n, f);
                    dx.middleCols(begin, count) = ConstMatrixMap(g.data(), n, count);
                    t.accumulate(x, Eigen::Map<const Array>(dx.data(), dx.size()));
                  });
}

// ---------------------------------------------------------------------------
// Harmonization ops

Var curve_knots(const Var& deltas) {
  require_rank(deltas, 3, "curve_knots");
  const int n = deltas.shape()[0], c = deltas.shape()[1], segs = deltas.shape()[2];
  const int k = segs + 1;
  Array out(std::int64_t(n) * c * k);
  Array increments(deltas.value().size());
  for (int r = 0; r < n * c; ++r) {
    const double* d = deltas.value().data() + std::ptrdiff_t(r) * segs;
    double* inc = increments.data() + std::ptrdiff_t(r) * segs;
    double total = 0.0;
    for (int i = 0; i < segs; ++i) {
      inc[i] = stable_softplus(d[i]) + kKnotFloor;
      total += inc[i];
    }
    double* x = out.data() + std::ptrdiff_t(r) * k;
    double cum = 0.0;
    x[0] = 0.0;
    for (int i = 1; i < k - 1; ++i) {
      cum += inc[i - 1];
      x[i] = cum / total;
    }
    x[k - 1] = 1.0;
  }
  Tape& t = *deltas.tape();
  return t.record({n, c, k}, std::move(out), {deltas}, [deltas, increments, n, c, segs, k](Tape& t, const Array& g) {
    Array dd(deltas.value().size());
    for (int r = 0; r < n * c; ++r) {
      const double* d = deltas.value().data() + std::ptrdiff_t(r) * segs;
      const double* inc = increments.data() + std::ptrdiff_t(r) * segs;
      const double* gx = g.data() + std::ptrdiff_t(r) * k;
      const double total = Eigen::Map<const Array>(inc, segs).sum();
      // Interior knots only: the endpoints are pinned constants.
      double weighted = 0.0;
      double cum = 0.0;
      for (int i = 1; i < k - 1; ++i) {
        cum += inc[i - 1];
        weighted += gx[i] * cum;
      }
      // Interior knot j depends on increment i when i < j.
      double sum_after = 0.0;
      for (int i = segs - 1; i >= 0; --i) {
        if (i + 1 <= k - 2) sum_after += gx[i + 1];
        const double ginc = sum_after / total - weighted / (total * total);
        dd[std::int64_t(r) * segs + i] = ginc * stable_sigmoid(d[i]);
      }
    }
    t.accumulate(deltas, dd);
  });
}

Var shading_gain(const Var& raw, double gain_max, double floor) {
  Tape& t = *raw.tape();
  Array s = raw.value().unaryExpr(&stable_sigmoid);
  Array out = (gain_max * s).max(floor);
  return t.record(raw.shape(), out, {raw}, [raw, s, gain_max, floor](Tape& t, const Array& g) {
    Array d = gain_max * s * (1.0 - s);
    d = (gain_max * s < floor).select(0.0, d);
    t.accumulate(raw, g * d);
  });
}

namespace {

void require_curve_inputs(const Var& img, const Var& mask, const Var& x, const Var& y) {
  require_rank(img, 4, "apply_curves");
  require_rank(mask, 4, "apply_curves mask");
  require_rank(x, 3, "apply_curves knots");
  const auto& s = img.shape();
  if (s[1] != 3) throw std::invalid_argument("apply_curves: expected 3 channels");
  if (mask.shape() != Shape{s[0], 1, s[2], s[3]}) throw std::invalid_argument("apply_curves: mask shape mismatch");
  if (x.shape() != y.shape() || x.shape()[0] != s[0] || x.shape()[1] != 3 || x.shape()[2] < 2) {
    throw std::invalid_argument("apply_curves: knot shape mismatch " + shape_string(x.shape()));
  }
}

int segment_of(const double* xs, int k, double v) {
  int lo = 0, hi = k - 1;
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    if (xs[mid] <= v) lo = mid; else hi = mid;
  }
  return lo;
}

}  // namespace

Var apply_curves(const Var& img, const Var& mask, const Var& x, const Var& y) {
  require_curve_inputs(img, mask, x, y);
  const int n = img.shape()[0], plane = img.shape()[2] * img.shape()[3], k = x.shape()[2];
  Array out(img.value().size());
  for (int b = 0; b < n; ++b) {
    for (int c = 0; c < 3; ++c) {
      const double* xs = x.value().data() + (std::ptrdiff_t(b) * 3 + c) * k;
      const double* ys = y.value().data() + (std::ptrdiff_t(b) * 3 + c) * k;
      const double* in = img.value().data() + (std::ptrdiff_t(b) * 3 + c) * plane;
      const double* m = mask.value().data() + std::ptrdiff_t(b) * plane;
      double* o = out.data() + (std::ptrdiff_t(b) * 3 + c) * plane;
      for (int p = 0; p < plane; ++p) {
        const double v = std::clamp(in[p], 0.0, 1.0);
        const int s = segment_of(xs, k, v);
        const double tt = (v - xs[s]) / (xs[s + 1] - xs[s]);
        const double mapped = ys[s] + tt * (ys[s + 1] - ys[s]);
        o[p] = v + m[p] * (mapped - v);
      }
    }
  }
  Tape& t = *img.tape();
  return t.record(img.shape(), std::move(out), {img, mask, x, y}, [img, mask, x, y, n, plane, k](Tape& t, const Array& g) {
    const bool need_img = t.requires_grad(img);
    const bool need_mask = t.requires_grad(mask);
    Array dimg = need_img ? Array::Zero(img.value().size()) : Array();
    Array dmask = need_mask ? Array::Zero(mask.value().size()) : Array();
    Array dx = Array::Zero(x.value().size());
    Array dy = Array::Zero(y.value().size());
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < 3; ++c) {
        const std::ptrdiff_t row = (std::ptrdiff_t(b) * 3 + c) * k;
        const double* xs = x.value().data() + row;
        const double* ys = y.value().data() + row;
        const double* in = img.value().data() + (std::ptrdiff_t(b) * 3 + c) * plane;
        const double* m = mask.value().data() + std::ptrdiff_t(b) * plane;
        const double* go = g.data() + (std::ptrdiff_t(b) * 3 + c) * plane;
        for (int p = 0; p < plane; ++p) {
          const double v = std::clamp(in[p], 0.0, 1.0);
          const int s = segment_of(xs, k, v);
          const double width = xs[s + 1] - xs[s];
          const double tt = (v - xs[s]) / width;
          const double rise = ys[s + 1] - ys[s];
          const double gm = go[p] * m[p];
          dy[row + s] += gm * (1.0 - tt);
          dy[row + s + 1] += gm * tt;
          dx[row + s] += gm * rise * (tt - 1.0) / width;
          dx[row + s + 1] += gm * (-rise * tt / width);
          if (need_img && in[p] >= 0.0 && in[p] <= 1.0) {
            dimg[(std::ptrdiff_t(b) * 3 + c) * plane + p] = go[p] * ((1.0 - m[p]) + m[p] * rise / width);
          }
          if (need_mask) dmask[std::ptrdiff_t(b) * plane + p] += go[p] * (ys[s] + tt * rise - v);
        }
      }
    }
    if (need_img) t.accumulate(img, dimg);
    if (need_mask) t.accumulate(mask, dmask);
    t.accumulate(x, dx);
    t.accumulate(y, dy);
  });
}

Var apply_shading(const Var& img, const Var& mask, const Var& gain) {
  require_rank(img, 4, "apply_shading");
  const auto& s = img.shape();
  const Shape plane_shape{s[0], 1, s[2], s[3]};
  if (mask.shape() != plane_shape) throw std::invalid_argument("apply_shading: mask shape mismatch");
  if (gain.shape() != plane_shape) {
    throw std::invalid_argument("apply_shading: gain " + shape_string(gain.shape()) + " must be " + shape_string(plane_shape));
  }
  const int n = s[0], ch = s[1], plane = s[2] * s[3];
  Array out(img.value().size());
  for (int b = 0; b < n; ++b) {
    const double* m = mask.value().data() + std::ptrdiff_t(b) * plane;
    const double* gn = gain.value().data() + std::ptrdiff_t(b) * plane;
    for (int c = 0; c < ch; ++c) {
      const double* in = img.value().data() + (std::ptrdiff_t(b) * ch + c) * plane;
      double* o = out.data() + (std::ptrdiff_t(b) * ch + c) * plane;
      for (int p = 0; p < plane; ++p) {
        const double shaded = std::clamp(in[p] * gn[p], 0.0, 1.0);
        o[p] = in[p] + m[p] * (shaded - in[p]);
      }
    }
  }
  Tape& t = *img.tape();
  return t.record(img.shape(), std::move(out), {img, mask, gain}, [img, mask, gain, n, ch, plane](Tape& t, const Array& g) {
    const bool need_mask = t.requires_grad(mask);
    Array dimg(img.value().size());
    Array dgain = Array::Zero(gain.value().size());
    Array dmask = need_mask ? Array::Zero(mask.value().size()) : Array();
    for (int b = 0; b < n; ++b) {
      const double* m = mask.value().data() + std::ptrdiff_t(b) * plane;
      const double* gn = gain.value().data() + std::ptrdiff_t(b) * plane;
      for (int c = 0; c < ch; ++c) {
        const std::ptrdiff_t off = (std::ptrdiff_t(b) * ch + c) * plane;
        const double* in = img.value().data() + off;
        const double* go = g.data() + off;
        for (int p = 0; p < plane; ++p) {
          const double prod = in[p] * gn[p];
          const bool inside = prod > 0.0 && prod < 1.0;
          dimg[off + p] = go[p] * ((1.0 - m[p]) + (inside ? m[p] * gn[p] : 0.0));
          if (inside) dgain[std::ptrdiff_t(b) * plane + p] += go[p] * m[p] * in[p];
          if (need_mask) dmask[std::ptrdiff_t(b) * plane + p] += go[p] * (std::clamp(prod, 0.0, 1.0) - in[p]);
        }
      }
    }
    t.accumulate(img, dimg);
    t.accumulate(gain, dgain);
    if (need_mask) t.accumulate(mask, dmask);
  });
}

Var l1_loss(const Var& pred, const Var& target) {
  require_same_shape(pred, target, "l1_loss");
  const auto n = pred.value().size();
  if (n == 0) throw std::invalid_argument("l1_loss: empty tensors");
  const Array diff = pred.value() - target.value();
  Tape& t = *pred.tape();
  return t.record({1}, Array::Constant(1, diff.abs().mean()), {pred, target}, [pred, target, diff, n](Tape& t, const Array& g) {
    const Array sgn = diff.sign() * (g[0] / double(n));
    t.accumulate(pred, sgn);
    t.accumulate(target, -sgn);
  });
}

}  // namespace harmonia::ad
