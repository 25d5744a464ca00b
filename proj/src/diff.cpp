#include "lacap/diff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace lacap::diff {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Builds an op output. Parents and the backward closure are only retained when
// gradient recording is on and some parent needs a gradient.
DiffArray make_op(Shape shape, std::vector<double> data, std::vector<DiffArray> parents,
                  std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return DiffArray(std::move(node));
}

void require_defined(const DiffArray& a, const char* op) {
  if (!a.defined()) throw ShapeError(op, "undefined operand");
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

void check_broadcastable(const char* op, const DiffArray& a, const DiffArray& b) {
  require_defined(a, op);
  require_defined(b, op);
  if (b.size() == 1 || is_suffix(a.shape(), b.shape())) return;
  throw ShapeError(op, a.shape(), b.shape());
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                       const char* op) {
  if (stride == 0 || kernel == 0 || in + 2 * pad < kernel) {
    throw ShapeError(op, "kernel " + std::to_string(kernel) + " does not fit extent " +
                             std::to_string(in) + " with padding " + std::to_string(pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

// ---- basics ----------------------------------------------------------------

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                            shape_str(b)) {}

ShapeError::ShapeError(const std::string& op, const std::string& what)
    : std::invalid_argument(op + ": " + what) {}

void Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

DiffArray DiffArray::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

DiffArray DiffArray::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

DiffArray DiffArray::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("from", "zero extent in " + shape_str(shape));
  }
  if (shape_size(shape) != data.size()) {
    throw ShapeError("from", "shape " + shape_str(shape) + " needs " +
                                 std::to_string(shape_size(shape)) + " values, got " +
                                 std::to_string(data.size()));
  }
  auto node = new_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return DiffArray(std::move(node));
}

DiffArray DiffArray::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& DiffArray::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t DiffArray::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim", "axis " + std::to_string(axis) + " of " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t DiffArray::size() const { return node_ ? node_->data.size() : 0; }
std::uint64_t DiffArray::node_id() const { return node_ ? node_->id : 0; }
std::span<const double> DiffArray::data() const { return node_->data; }
std::span<double> DiffArray::mutable_data() { return node_->data; }

double DiffArray::item() const {
  if (size() != 1) throw ShapeError("item", "expected one element, shape " + shape_str(shape()));
  return node_->data[0];
}

bool DiffArray::requires_grad() const { return node_ && node_->requires_grad; }
void DiffArray::set_requires_grad(bool value) { node_->requires_grad = value; }
bool DiffArray::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
std::span<const double> DiffArray::grad() const { return node_->grad; }

std::span<double> DiffArray::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void DiffArray::zero_grad() {
  if (!node_) return;
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  node_->backward_done = false;
}

DiffArray DiffArray::detach() const {
  require_defined(*this, "detach");
  auto node = new_node(node_->shape, node_->data);
  return DiffArray(std::move(node));
}

void DiffArray::backward() {
  require_defined(*this, "backward");
  if (size() != 1) throw ShapeError("backward", "root must be scalar, got " + shape_str(shape()));
  if (node_->backward_done) {
    throw std::logic_error("backward: graph already differentiated; call zero_grad() first");
  }
  node_->backward_done = true;
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward_fn) {
      n->grad.assign(n->data.size(), 0.0);
    } else {
      n->ensure_grad();
    }
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- elementwise -----------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b) {
  check_broadcastable("add", a, b);
  const auto n = a.size(), m = b.size();
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] += bd[i % m];
  return make_op(a.shape(), std::move(out), {a, b}, [m](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % m] += self.grad[i];
    }
  });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  check_broadcastable("sub", a, b);
  const auto n = a.size(), m = b.size();
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] -= bd[i % m];
  return make_op(a.shape(), std::move(out), {a, b}, [m](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % m] -= self.grad[i];
    }
  });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  check_broadcastable("mul", a, b);
  const auto n = a.size(), m = b.size();
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % m];
  return make_op(a.shape(), std::move(out), {a, b}, [m](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i % m];
      if (pb.requires_grad) pb.grad[i % m] += self.grad[i] * pa.data[i];
    }
  });
}

DiffArray scale(const DiffArray& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_op(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += factor * self.grad[i];
  });
}

DiffArray add_scalar(const DiffArray& a, double value) {
  require_defined(a, "add_scalar");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  return make_op(a.shape(), std::move(out), {a}, [](Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

DiffArray broadcast_mul(const DiffArray& a, const DiffArray& b) {
  require_defined(a, "broadcast_mul");
  require_defined(b, "broadcast_mul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != bs.size()) throw ShapeError("broadcast_mul", as, bs);
  for (std::size_t i = 0; i < as.size(); ++i) {
    if (bs[i] != as[i] && bs[i] != 1) throw ShapeError("broadcast_mul", as, bs);
  }
  // Map every output flat index to the corresponding flat index of b.
  const std::size_t n = a.size();
  const std::size_t r = as.size();
  std::vector<std::size_t> bstride(r, 0);
  {
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
      bstride[i] = bs[i] == 1 ? 0 : s;
      s *= bs[i];
    }
  }
  auto bindex = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < r; ++i) off += idx[i] * bstride[i];
      (*bindex)[flat] = off;
      for (std::size_t i = r; i-- > 0;) {
        if (++idx[i] < as[i]) break;
        idx[i] = 0;
      }
    }
  }
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[(*bindex)[i]];
  return make_op(as, std::move(out), {a, b}, [bindex](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& bi = *bindex;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[bi[i]];
      if (pb.requires_grad) pb.grad[bi[i]] += self.grad[i] * pa.data[i];
    }
  });
}

// ---- matmul ----------------------------------------------------------------

DiffArray matmul(const DiffArray& a, const DiffArray& b, bool transpose_b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool ok_rank = (as.size() == 2 && bs.size() == 2) || (as.size() == 3 && bs.size() == 2) ||
                       (as.size() == 3 && bs.size() == 3 && as[0] == bs[0]);
  if (!ok_rank) throw ShapeError("matmul", as, bs);
  const std::size_t k = as.back();
  const std::size_t bk = transpose_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  const std::size_t nn = transpose_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (k != bk) throw ShapeError("matmul", as, bs);

  const bool batched = bs.size() == 3;
  const std::size_t batches = batched ? as[0] : 1;
  const std::size_t m = batched ? as[1] : a.size() / k;

  Shape out_shape = as;
  out_shape.back() = nn;
  std::vector<double> out(batches * m * nn);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    CMapR am(a.data().data() + bi * m * k, m, k);
    MapR om(out.data() + bi * m * nn, m, nn);
    const double* bp = b.data().data() + (batched ? bi * k * nn : 0);
    if (transpose_b) {
      om.noalias() = am * CMapR(bp, nn, k).transpose();
    } else {
      om.noalias() = am * CMapR(bp, k, nn);
    }
  }
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [batches, batched, m, k, nn, transpose_b](Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   for (std::size_t bi = 0; bi < batches; ++bi) {
                     CMapR g(self.grad.data() + bi * m * nn, m, nn);
                     const std::size_t boff = batched ? bi * k * nn : 0;
                     if (pa.requires_grad) {
                       MapR ga(pa.grad.data() + bi * m * k, m, k);
                       if (transpose_b) {
                         ga.noalias() += g * CMapR(pb.data.data() + boff, nn, k);
                       } else {
                         ga.noalias() += g * CMapR(pb.data.data() + boff, k, nn).transpose();
                       }
                     }
                     if (pb.requires_grad) {
                       CMapR am(pa.data.data() + bi * m * k, m, k);
                       if (transpose_b) {
                         MapR gb(pb.grad.data() + boff, nn, k);
                         gb.noalias() += g.transpose() * am;
                       } else {
                         MapR gb(pb.grad.data() + boff, k, nn);
                         gb.noalias() += am.transpose() * g;
                       }
                     }
                   }
                 });
}

// ---- convolution and pooling ----------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, oh, ow, stride, pad;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((ci * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? img[(ci * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((ci * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

DiffArray conv2d(const DiffArray& x, const DiffArray& weight, const DiffArray& bias,
                 Conv2dOptions options) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1]) throw ShapeError("conv2d", xs, ws);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ws[0])) {
    throw ShapeError("conv2d", ws, bias.shape());
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, options.stride,
                 options.padding};
  g.oh = out_extent(g.h, g.kh, g.stride, g.pad, "conv2d");
  g.ow = out_extent(g.w, g.kw, g.stride, g.pad, "conv2d");

  const std::size_t rows = g.col_rows(), ncols = g.col_cols();
  auto cols = std::make_shared<std::vector<double>>(g.n * rows * ncols);
  std::vector<double> out(g.n * g.f * ncols);
  CMapR wm(weight.data().data(), g.f, rows);
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    double* cp = cols->data() + ni * rows * ncols;
    im2col(x.data().data() + ni * g.c * g.h * g.w, g, cp);
    MapR om(out.data() + ni * g.f * ncols, g.f, ncols);
    om.noalias() = wm * CMapR(cp, rows, ncols);
    if (bias.defined()) {
      for (std::size_t fi = 0; fi < g.f; ++fi) om.row(fi).array() += bias.data()[fi];
    }
  }
  std::vector<DiffArray> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return make_op({g.n, g.f, g.oh, g.ow}, std::move(out), std::move(parents),
                 [g, cols, has_bias](Node& self) {
                   auto& px = *self.parents[0];
                   auto& pw = *self.parents[1];
                   const std::size_t rows = g.col_rows(), ncols = g.col_cols();
                   std::vector<double> dcols(px.requires_grad ? rows * ncols : 0);
                   for (std::size_t ni = 0; ni < g.n; ++ni) {
                     CMapR gm(self.grad.data() + ni * g.f * ncols, g.f, ncols);
                     CMapR cm(cols->data() + ni * rows * ncols, rows, ncols);
                     if (pw.requires_grad) {
                       MapR gw(pw.grad.data(), g.f, rows);
                       gw.noalias() += gm * cm.transpose();
                     }
                     if (has_bias && self.parents[2]->requires_grad) {
                       auto& pbias = *self.parents[2];
                       for (std::size_t fi = 0; fi < g.f; ++fi) pbias.grad[fi] += gm.row(fi).sum();
                     }
                     if (px.requires_grad) {
                       MapR dc(dcols.data(), rows, ncols);
                       dc.noalias() = CMapR(pw.data.data(), g.f, rows).transpose() * gm;
                       col2im_add(dcols.data(), g, px.grad.data() + ni * g.c * g.h * g.w);
                     }
                   }
                 });
}

DiffArray max_pool2d(const DiffArray& x, std::size_t kernel, std::size_t stride) {
  require_defined(x, "max_pool2d");
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("max_pool2d", "expected [N,C,H,W], got " + shape_str(xs));
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = out_extent(h, kernel, stride, 0, "max_pool2d");
  const std::size_t ow = out_extent(w, kernel, stride, 0, "max_pool2d");
  std::vector<double> out(planes * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (xd[idx] > xd[best] || (std::isnan(xd[idx]) && !std::isnan(xd[best]))) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = xd[best];
        (*arg)[o] = best;
      }
    }
  }
  return make_op({xs[0], xs[1], oh, ow}, std::move(out), {x}, [arg](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[(*arg)[i]] += self.grad[i];
  });
}

DiffArray avg_pool2d(const DiffArray& x, std::size_t kernel, std::size_t stride) {
  require_defined(x, "avg_pool2d");
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("avg_pool2d", "expected [N,C,H,W], got " + shape_str(xs));
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = out_extent(h, kernel, stride, 0, "avg_pool2d");
  const std::size_t ow = out_extent(w, kernel, stride, 0, "avg_pool2d");
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  std::vector<double> out(planes * oh * ow, 0.0);
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            s += xd[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
          }
        }
        out[(p * oh + oy) * ow + ox] = s * inv;
      }
    }
  }
  return make_op({xs[0], xs[1], oh, ow}, std::move(out), {x},
                 [planes, h, w, oh, ow, kernel, stride, inv](Node& self) {
                   auto& px = *self.parents[0];
                   for (std::size_t p = 0; p < planes; ++p) {
                     for (std::size_t oy = 0; oy < oh; ++oy) {
                       for (std::size_t ox = 0; ox < ow; ++ox) {
                         const double g = self.grad[(p * oh + oy) * ow + ox] * inv;
                         for (std::size_t ky = 0; ky < kernel; ++ky) {
                           for (std::size_t kx = 0; kx < kernel; ++kx) {
                             px.grad[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                           }
                         }
                       }
                     }
                   }
                 });
}

DiffArray global_avg_pool2d(const DiffArray& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool2d", "expected [N,C,H,W], got " + shape_str(x.shape()));
  const auto& s = x.shape();
  return reshape(mean_axis(reshape(x, {s[0], s[1], s[2] * s[3]}), 2), {s[0], s[1], 1, 1});
}

DiffArray global_max_pool2d(const DiffArray& x) {
  if (x.rank() != 4) throw ShapeError("global_max_pool2d", "expected [N,C,H,W], got " + shape_str(x.shape()));
  const auto& s = x.shape();
  return reshape(max_axis(reshape(x, {s[0], s[1], s[2] * s[3]}), 2), {s[0], s[1], 1, 1});
}

// ---- nonlinearities and normalization -------------------------------------

DiffArray relu(const DiffArray& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 || std::isnan(v) ? v : 0.0;
  return make_op(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (px.data[i] > 0.0) px.grad[i] += self.grad[i];
    }
  });
}

DiffArray sigmoid(const DiffArray& x) {
  require_defined(x, "sigmoid");
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xd[i]));
  return make_op(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.data[i];
      px.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

DiffArray softmax(const DiffArray& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) throw ShapeError("softmax", "axis out of range for " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xd[base + e * sp.inner]);
      double sum = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = std::exp(xd[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        sum += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= sum;
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [sp](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.extent * sp.inner + in;
        double dot = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) {
          dot += self.grad[base + e * sp.inner] * self.data[base + e * sp.inner];
        }
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          px.grad[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

DiffArray layer_norm(const DiffArray& x, std::size_t axis, double eps) {
  require_defined(x, "layer_norm");
  if (axis >= x.rank()) throw ShapeError("layer_norm", "axis out of range for " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  std::vector<double> out(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(sp.outer * sp.inner);
  auto xd = x.data();
  const double inv_n = 1.0 / static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mean = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) mean += xd[base + e * sp.inner];
      mean *= inv_n;
      double var = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double d = xd[base + e * sp.inner] - mean;
        var += d * d;
      }
      var *= inv_n;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[o * sp.inner + in] = is;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        out[base + e * sp.inner] = (xd[base + e * sp.inner] - mean) * is;
      }
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [sp, inv_std, inv_n](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.extent * sp.inner + in;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          mg += self.grad[i];
          mgy += self.grad[i] * self.data[i];
        }
        mg *= inv_n;
        mgy *= inv_n;
        const double is = (*inv_std)[o * sp.inner + in];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          px.grad[i] += is * (self.grad[i] - mg - self.data[i] * mgy);
        }
      }
    }
  });
}

// ---- indexing and layout ---------------------------------------------------

DiffArray embedding_lookup(const DiffArray& table, std::span<const int> ids) {
  require_defined(table, "embedding_lookup");
  if (table.rank() != 2) throw ShapeError("embedding_lookup", "table must be [V,D], got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("embedding_lookup", "empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("embedding_lookup", "id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(v));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto id_copy = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_op({ids.size(), d}, std::move(out), {table}, [id_copy, d](Node& self) {
    auto& pt = *self.parents[0];
    for (std::size_t i = 0; i < id_copy->size(); ++i) {
      const std::size_t row = static_cast<std::size_t>((*id_copy)[i]);
      for (std::size_t j = 0; j < d; ++j) pt.grad[row * d + j] += self.grad[i * d + j];
    }
  });
}

DiffArray concat(const std::vector<DiffArray>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat", first, s);
    out_shape[axis] += s[axis];
  }
  const auto sp = split_at(out_shape, axis);
  std::vector<double> out(shape_size(out_shape));
  auto extents = std::make_shared<std::vector<std::size_t>>();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t e = p.dim(axis);
    extents->push_back(e);
    auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * e * sp.inner), e * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + offset) * sp.inner));
    }
    offset += e;
  }
  return make_op(std::move(out_shape), std::move(out), parts, [sp, extents](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t e = (*extents)[k];
      auto& pp = *self.parents[k];
      if (pp.requires_grad) {
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = self.grad.data() + (o * sp.extent + offset) * sp.inner;
          double* dst = pp.grad.data() + o * e * sp.inner;
          for (std::size_t i = 0; i < e * sp.inner; ++i) dst[i] += src[i];
        }
      }
      offset += e;
    }
  });
}

DiffArray reshape(const DiffArray& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_size(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

DiffArray permute(const DiffArray& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permute", "axis list length does not match rank of " + shape_str(in));
  std::vector<bool> used(r, false);
  for (auto a : axes) {
    if (a >= r || used[a]) throw ShapeError("permute", "invalid axis permutation for " + shape_str(in));
    used[a] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];

  const std::size_t n = x.size();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[axes[i]];
    (*src)[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*src)[i]];
  return make_op(std::move(out_shape), std::move(out), {x}, [src](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[(*src)[i]] += self.grad[i];
  });
}

// ---- reductions --------------------------------------------------------------

DiffArray mean_axis(const DiffArray& x, std::size_t axis) {
  require_defined(x, "mean_axis");
  if (axis >= x.rank()) throw ShapeError("mean_axis", "axis out of range for " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto xd = x.data();
  const double inv = 1.0 / static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        out[o * sp.inner + in] += xd[(o * sp.extent + e) * sp.inner + in];
      }
    }
  }
  for (auto& v : out) v *= inv;
  return make_op(std::move(out_shape), std::move(out), {x}, [sp, inv](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t e = 0; e < sp.extent; ++e) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          px.grad[(o * sp.extent + e) * sp.inner + in] += self.grad[o * sp.inner + in] * inv;
        }
      }
    }
  });
}

DiffArray max_axis(const DiffArray& x, std::size_t axis) {
  require_defined(x, "max_axis");
  if (axis >= x.rank()) throw ShapeError("max_axis", "axis out of range for " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      std::size_t best = o * sp.extent * sp.inner + in;
      for (std::size_t e = 1; e < sp.extent; ++e) {
        const std::size_t i = (o * sp.extent + e) * sp.inner + in;
        if (xd[i] > xd[best] || (std::isnan(xd[i]) && !std::isnan(xd[best]))) best = i;
      }
      out[o * sp.inner + in] = xd[best];
      (*arg)[o * sp.inner + in] = best;
    }
  }
  return make_op(std::move(out_shape), std::move(out), {x}, [arg](Node& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[(*arg)[i]] += self.grad[i];
  });
}

DiffArray reduce_sum(const DiffArray& x) {
  require_defined(x, "reduce_sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op({1}, {s}, {x}, [](Node& self) {
    auto& px = *self.parents[0];
    for (auto& g : px.grad) g += self.grad[0];
  });
}

DiffArray reduce_mean(const DiffArray& x) {
  return scale(reduce_sum(x), 1.0 / static_cast<double>(x.size()));
}

DiffArray pick(const DiffArray& logits, std::span<const int> index) {
  require_defined(logits, "pick");
  if (logits.rank() != 2 || logits.dim(0) != index.size()) {
    throw ShapeError("pick", logits.shape(), Shape{index.size()});
  }
  const std::size_t k = logits.dim(1);
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= k) {
      throw ShapeError("pick", "index " + std::to_string(index[i]) + " outside " + std::to_string(k) + " classes");
    }
    out[i] = logits.data()[i * k + static_cast<std::size_t>(index[i])];
  }
  auto idx = std::make_shared<std::vector<int>>(index.begin(), index.end());
  return make_op({index.size()}, std::move(out), {logits}, [idx, k](Node& self) {
    auto& pl = *self.parents[0];
    for (std::size_t i = 0; i < idx->size(); ++i) {
      pl.grad[i * k + static_cast<std::size_t>((*idx)[i])] += self.grad[i];
    }
  });
}

DiffArray cross_entropy(const DiffArray& logits, std::span<const int> targets, int ignore_index) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy", logits.shape(), Shape{targets.size()});
  }
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(rows * k);
  auto ld = logits.data();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = ld.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - lse);
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
      throw ShapeError("cross_entropy", "target " + std::to_string(targets[r]) + " outside " + std::to_string(k) + " classes");
    }
    total += lse - row[targets[r]];
    ++counted;
  }
  const double inv = counted ? 1.0 / static_cast<double>(counted) : 0.0;
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return make_op({1}, {total * inv}, {logits}, [probs, tg, k, inv, ignore_index](Node& self) {
    auto& pl = *self.parents[0];
    const double g = self.grad[0] * inv;
    for (std::size_t r = 0; r < tg->size(); ++r) {
      if ((*tg)[r] == ignore_index) continue;
      for (std::size_t j = 0; j < k; ++j) pl.grad[r * k + j] += g * (*probs)[r * k + j];
      pl.grad[r * k + static_cast<std::size_t>((*tg)[r])] -= g;
    }
  });
}

DiffArray cross_entropy(const DiffArray& logits, int target) {
  if (logits.rank() != 1) throw ShapeError("cross_entropy", "expected rank-1 logits, got " + shape_str(logits.shape()));
  const int t[] = {target};
  return cross_entropy(reshape(logits, {1, logits.dim(0)}), t);
}

DiffArray custom_op(Shape shape, std::vector<double> data, std::vector<DiffArray> parents,
                    std::function<void(Node&)> backward_fn) {
  if (shape_size(shape) != data.size()) throw ShapeError("custom_op", "value count does not match " + shape_str(shape));
  return make_op(std::move(shape), std::move(data), std::move(parents), std::move(backward_fn));
}

// ---- finite differences ----------------------------------------------------

GradCheckReport grad_check(const ScalarFn& f, const DiffArray& x, double h, double tol) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");
  GradCheckReport report;
  EnableGradGuard enable;
  auto leaf = DiffArray::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  auto y = f(leaf);
  if (y.size() != 1) throw ShapeError("grad_check", "function must return a scalar, got " + shape_str(y.shape()));
  if (!std::isfinite(y.item())) {
    report.diagnostic = "non-finite function value at x";
    return report;
  }
  y.backward();
  std::vector<double> analytic(x.size(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(DiffArray::from(x.shape(), probe)).item();
    probe[i] = orig - h;
    const double fm = f(DiffArray::from(x.shape(), probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      report.worst_index = i;
      report.max_rel_error = report.max_abs_error = std::numeric_limits<double>::infinity();
      report.diagnostic = "non-finite gradient at index " + std::to_string(i);
      report.passed = false;
      return report;
    }
    const double abs_err = std::abs(analytic[i] - numeric);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
    const double rel_err = abs_err / denom;
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel_err > report.max_rel_error) {
      report.max_rel_error = rel_err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace lacap::diff
