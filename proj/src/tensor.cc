#include "skewsplit/tensor.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "skewsplit/errors.h"

namespace skewsplit {

using internal::Node;

std::size_t NumElements(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

void ValidateShape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError("tensor dimensions must be positive, got " +
                       ShapeToString(shape));
    }
  }
}

const Node& Checked(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw ShapeError(std::string(op) + ": undefined tensor");
  }
  const Node& n = *t.node();
  for (double v : n.data) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": non-finite input value in " +
                           ShapeToString(n.shape));
    }
  }
  return n;
}

}  // namespace

namespace internal {

Tensor MakeResult(Shape shape, std::vector<double> data,
                  std::vector<std::shared_ptr<Node>> inputs,
                  std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor::FromNode(std::move(node));
}

}  // namespace internal

namespace {

using internal::MakeResult;

// Binary elementwise dispatch: equal shapes or one single-element operand.
enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast ResolveBroadcast(const Node& a, const Node& b, const char* op) {
  if (a.shape == b.shape) return Broadcast::kNone;
  if (b.data.size() == 1) return Broadcast::kRightScalar;
  if (a.data.size() == 1) return Broadcast::kLeftScalar;
  throw ShapeError(std::string(op) + ": shape mismatch " +
                   ShapeToString(a.shape) + " vs " + ShapeToString(b.shape));
}

// Shape [outer, axis, inner] view used by axis reductions.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
  Shape reduced;
};

AxisView MakeAxisView(const Shape& shape, int axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for " +
                     ShapeToString(shape));
  }
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (int i = axis + 1; i < rank; ++i) v.inner *= shape[i];
  for (int i = 0; i < rank; ++i) {
    if (i != axis) v.reduced.push_back(shape[i]);
  }
  return v;
}

template <typename Fwd, typename DA, typename DB>
Tensor Binary(const Tensor& ta, const Tensor& tb, const char* op, Fwd fwd,
              DA da, DB db) {
  const Node& a = Checked(ta, op);
  const Node& b = Checked(tb, op);
  const Broadcast mode = ResolveBroadcast(a, b, op);
  const Shape out_shape = mode == Broadcast::kLeftScalar ? b.shape : a.shape;
  const std::size_t n = NumElements(out_shape);
  auto ia = [mode](std::size_t i) {
    return mode == Broadcast::kLeftScalar ? 0 : i;
  };
  auto ib = [mode](std::size_t i) {
    return mode == Broadcast::kRightScalar ? 0 : i;
  };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data[ia(i)], b.data[ib(i)]);
  return MakeResult(
      out_shape, std::move(out), {ta.node(), tb.node()},
      [mode, n, ia, ib, da, db](Node& self) {
        Node& a = *self.inputs[0];
        Node& b = *self.inputs[1];
        if (a.requires_grad) a.EnsureGrad();
        if (b.requires_grad) b.EnsureGrad();
        for (std::size_t i = 0; i < n; ++i) {
          const double g = self.grad[i];
          const double x = a.data[ia(i)];
          const double y = b.data[ib(i)];
          if (a.requires_grad) a.grad[ia(i)] += g * da(x, y);
          if (b.requires_grad) b.grad[ib(i)] += g * db(x, y);
        }
        (void)mode;
      });
}

template <typename Fwd, typename Deriv>
Tensor Unary(const Tensor& tx, const char* op, Fwd fwd, Deriv deriv) {
  const Node& x = Checked(tx, op);
  std::vector<double> out(x.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.data[i]);
  return MakeResult(x.shape, std::move(out), {tx.node()}, [deriv](Node& self) {
    Node& x = *self.inputs[0];
    x.EnsureGrad();
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      x.grad[i] += self.grad[i] * deriv(x.data[i], self.data[i]);
    }
  });
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::Zeros(Shape shape, bool requires_grad) {
  return Full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::Full(Shape shape, double value, bool requires_grad) {
  ValidateShape(shape);
  const std::size_t n = NumElements(shape);
  return FromData(std::move(shape), std::vector<double>(n, value),
                  requires_grad);
}

Tensor Tensor::FromData(Shape shape, std::vector<double> data,
                        bool requires_grad) {
  ValidateShape(shape);
  if (NumElements(shape) != data.size()) {
    throw ShapeError("shape " + ShapeToString(shape) + " needs " +
                     std::to_string(NumElements(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::Scalar(double value, bool requires_grad) {
  return FromData({}, {value}, requires_grad);
}

Tensor Tensor::FromNode(std::shared_ptr<internal::Node> node) {
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("shape() on undefined tensor");
  return node_->shape;
}

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("dim(): axis out of range for " + ShapeToString(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->data;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " +
                     ShapeToString(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

void Tensor::ZeroGrad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::ClearGrad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::Detach() const {
  if (!node_) return {};
  if (!node_->requires_grad) return *this;
  return FromData(node_->shape, node_->data, false);
}

Tensor Tensor::Clone(bool requires_grad) const {
  if (!node_) return {};
  return FromData(node_->shape, node_->data, requires_grad);
}

// ---- Tape -----------------------------------------------------------------

GradientTape GradientTape::Record(const Tensor& root) {
  GradientTape tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  // Iterative post-order DFS; inputs are emitted before their consumers.
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void GradientTape::Replay(const Tensor& root) const {
  if (nodes_.empty()) return;
  Node& r = *root.node();
  r.EnsureGrad();
  for (double& g : r.grad) g += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

void Backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("Backward needs a scalar loss, got " +
                     (loss.defined() ? ShapeToString(loss.shape())
                                     : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ShapeError("Backward: loss is not on a gradient tape");
  }
  GradientTape::Record(loss).Replay(loss);
}

// ---- Elementwise ----------------------------------------------------------

Tensor Add(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor Div(const Tensor& a, const Tensor& b) {
  for (double v : Checked(b, "div").data) {
    if (v == 0.0) throw NonFiniteError("div: division by zero");
  }
  return Binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor Scale(const Tensor& x, double factor) {
  return Unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor AddScalar(const Tensor& x, double offset) {
  return Unary(
      x, "add_scalar", [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Tensor Relu(const Tensor& x) {
  return Unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor Sigmoid(const Tensor& x) {
  return Unary(
      x, "sigmoid",
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor Abs(const Tensor& x) {
  return Unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---- Linear algebra -------------------------------------------------------

Tensor MatMul(const Tensor& ta, const Tensor& tb) {
  const Node& a = Checked(ta, "matmul");
  const Node& b = Checked(tb, "matmul");
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul: shape mismatch " + ShapeToString(a.shape) +
                     " vs " + ShapeToString(b.shape));
  }
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* row = &out[static_cast<std::size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double av = a.data[static_cast<std::size_t>(i) * k + p];
      const double* brow = &b.data[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return MakeResult({m, n}, std::move(out), {ta.node(), tb.node()},
                    [m, k, n](Node& self) {
                      Node& a = *self.inputs[0];
                      Node& b = *self.inputs[1];
                      if (a.requires_grad) {
                        a.EnsureGrad();
                        for (int i = 0; i < m; ++i) {
                          const double* g = &self.grad[std::size_t(i) * n];
                          for (int p = 0; p < k; ++p) {
                            const double* brow = &b.data[std::size_t(p) * n];
                            double acc = 0.0;
                            for (int j = 0; j < n; ++j) acc += g[j] * brow[j];
                            a.grad[std::size_t(i) * k + p] += acc;
                          }
                        }
                      }
                      if (b.requires_grad) {
                        b.EnsureGrad();
                        for (int i = 0; i < m; ++i) {
                          const double* g = &self.grad[std::size_t(i) * n];
                          for (int p = 0; p < k; ++p) {
                            const double av = a.data[std::size_t(i) * k + p];
                            double* bg = &b.grad[std::size_t(p) * n];
                            for (int j = 0; j < n; ++j) bg[j] += av * g[j];
                          }
                        }
                      }
                    });
}

Tensor Conv2d(const Tensor& tx, const Tensor& tk, Conv2dOptions options) {
  const Node& x = Checked(tx, "conv2d");
  const Node& w = Checked(tk, "conv2d");
  if (x.shape.size() != 4 || w.shape.size() != 4 || w.shape[0] != w.shape[1] ||
      w.shape[2] != x.shape[3]) {
    throw ShapeError("conv2d: shape mismatch input " + ShapeToString(x.shape) +
                     " (NHWC) vs kernel " + ShapeToString(w.shape) +
                     " (KxKxCinxCout)");
  }
  if (options.stride < 1 || options.padding < 0) {
    throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  }
  const int batch = x.shape[0], h = x.shape[1], wd = x.shape[2],
            cin = x.shape[3];
  const int ks = w.shape[0], cout = w.shape[3];
  const int stride = options.stride, pad = options.padding;
  const int oh = (h + 2 * pad - ks) / stride + 1;
  const int ow = (wd + 2 * pad - ks) / stride + 1;
  if (h + 2 * pad < ks || wd + 2 * pad < ks || oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel " + ShapeToString(w.shape) +
                     " larger than padded input " + ShapeToString(x.shape));
  }
  // Visits every (output position, kernel tap, input channel) triple with
  // valid input coordinates; `fn` receives flat offsets into x, w and out.
  auto for_each_tap = [=](auto&& fn) {
    for (int n = 0; n < batch; ++n) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const std::size_t out_off =
              ((std::size_t(n) * oh + oy) * ow + ox) * cout;
          for (int ky = 0; ky < ks; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < ks; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              const std::size_t x_off =
                  ((std::size_t(n) * h + iy) * wd + ix) * cin;
              const std::size_t w_off = (std::size_t(ky) * ks + kx) * cin * cout;
              fn(x_off, w_off, out_off);
            }
          }
        }
      }
    }
  };
  std::vector<double> out(std::size_t(batch) * oh * ow * cout, 0.0);
  for_each_tap([&](std::size_t x_off, std::size_t w_off, std::size_t o_off) {
    double* o = &out[o_off];
    for (int ci = 0; ci < cin; ++ci) {
      const double xv = x.data[x_off + ci];
      if (xv == 0.0) continue;
      const double* wr = &w.data[w_off + std::size_t(ci) * cout];
      for (int co = 0; co < cout; ++co) o[co] += xv * wr[co];
    }
  });
  return MakeResult(
      {batch, oh, ow, cout}, std::move(out), {tx.node(), tk.node()},
      [for_each_tap, cin, cout](Node& self) {
        Node& x = *self.inputs[0];
        Node& w = *self.inputs[1];
        if (x.requires_grad) x.EnsureGrad();
        if (w.requires_grad) w.EnsureGrad();
        for_each_tap([&](std::size_t x_off, std::size_t w_off,
                         std::size_t o_off) {
          const double* g = &self.grad[o_off];
          for (int ci = 0; ci < cin; ++ci) {
            const std::size_t wrow = w_off + std::size_t(ci) * cout;
            if (x.requires_grad) {
              double acc = 0.0;
              for (int co = 0; co < cout; ++co) acc += g[co] * w.data[wrow + co];
              x.grad[x_off + ci] += acc;
            }
            if (w.requires_grad) {
              const double xv = x.data[x_off + ci];
              if (xv == 0.0) continue;
              double* wg = &w.grad[wrow];
              for (int co = 0; co < cout; ++co) wg[co] += xv * g[co];
            }
          }
        });
      });
}

Tensor AddBias(const Tensor& tx, const Tensor& tb) {
  const Node& x = Checked(tx, "add_bias");
  const Node& b = Checked(tb, "add_bias");
  if (x.shape.empty() || b.shape.size() != 1 || b.shape[0] != x.shape.back()) {
    throw ShapeError("add_bias: shape mismatch " + ShapeToString(x.shape) +
                     " vs bias " + ShapeToString(b.shape));
  }
  const std::size_t c = b.shape[0];
  std::vector<double> out = x.data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data[i % c];
  return MakeResult(x.shape, std::move(out), {tx.node(), tb.node()},
                    [c](Node& self) {
                      Node& x = *self.inputs[0];
                      Node& b = *self.inputs[1];
                      if (x.requires_grad) {
                        x.EnsureGrad();
                        for (std::size_t i = 0; i < self.grad.size(); ++i) {
                          x.grad[i] += self.grad[i];
                        }
                      }
                      if (b.requires_grad) {
                        b.EnsureGrad();
                        for (std::size_t i = 0; i < self.grad.size(); ++i) {
                          b.grad[i % c] += self.grad[i];
                        }
                      }
                    });
}

// ---- Reductions -----------------------------------------------------------

Tensor Sum(const Tensor& tx) {
  const Node& x = Checked(tx, "sum");
  double s = 0.0;
  for (double v : x.data) s += v;
  return MakeResult({}, {s}, {tx.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    x.EnsureGrad();
    for (double& g : x.grad) g += self.grad[0];
  });
}

Tensor Sum(const Tensor& tx, int axis) {
  const Node& x = Checked(tx, "sum");
  const AxisView v = MakeAxisView(x.shape, axis, "sum");
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        out[o * v.inner + i] += x.data[(o * v.len + l) * v.inner + i];
      }
    }
  }
  return MakeResult(v.reduced, std::move(out), {tx.node()}, [v](Node& self) {
    Node& x = *self.inputs[0];
    x.EnsureGrad();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t l = 0; l < v.len; ++l) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          x.grad[(o * v.len + l) * v.inner + i] += self.grad[o * v.inner + i];
        }
      }
    }
  });
}

Tensor Mean(const Tensor& x) {
  return Scale(Sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor Mean(const Tensor& x, int axis) {
  const int len = x.dim(axis);
  return Scale(Sum(x, axis), 1.0 / len);
}

namespace {

// Arg-extremum along an axis; ties resolve to the lowest index.
Tensor ExtremumAlong(const Tensor& tx, int axis, bool take_max,
                     const char* op) {
  const Node& x = Checked(tx, op);
  const AxisView v = MakeAxisView(x.shape, axis, op);
  std::vector<double> out(v.outer * v.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = o * v.len * v.inner + i;
      for (std::size_t l = 1; l < v.len; ++l) {
        const std::size_t idx = (o * v.len + l) * v.inner + i;
        if (take_max ? x.data[idx] > x.data[best] : x.data[idx] < x.data[best]) {
          best = idx;
        }
      }
      out[o * v.inner + i] = x.data[best];
      arg[o * v.inner + i] = best;
    }
  }
  return MakeResult(v.reduced, std::move(out), {tx.node()},
                    [arg = std::move(arg)](Node& self) {
                      Node& x = *self.inputs[0];
                      x.EnsureGrad();
                      for (std::size_t j = 0; j < arg.size(); ++j) {
                        x.grad[arg[j]] += self.grad[j];
                      }
                    });
}

}  // namespace

Tensor Max(const Tensor& tx) {
  return ExtremumAlong(Reshape(tx, {static_cast<int>(tx.size())}), 0, true,
                       "max");
}

Tensor Max(const Tensor& x, int axis) {
  return ExtremumAlong(x, axis, true, "max");
}

Tensor Min(const Tensor& x, int axis) {
  return ExtremumAlong(x, axis, false, "min");
}

// ---- Probability ----------------------------------------------------------

Tensor Softmax(const Tensor& tx) {
  const Node& x = Checked(tx, "softmax");
  if (x.shape.empty()) throw ShapeError("softmax: needs rank >= 1");
  const std::size_t c = x.shape.back();
  const std::size_t rows = x.data.size() / c;
  std::vector<double> out(x.data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &x.data[r * c];
    double* o = &out[r * c];
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return MakeResult(x.shape, std::move(out), {tx.node()}, [c, rows](Node& self) {
    Node& x = *self.inputs[0];
    x.EnsureGrad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = &self.data[r * c];
      const double* g = &self.grad[r * c];
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += s[j] * g[j];
      for (std::size_t j = 0; j < c; ++j) x.grad[r * c + j] += s[j] * (g[j] - dot);
    }
  });
}

Tensor SoftmaxCrossEntropy(const Tensor& tl, std::span<const int> labels) {
  const Node& l = Checked(tl, "softmax_cross_entropy");
  if (l.shape.size() != 2 || static_cast<std::size_t>(l.shape[0]) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + ShapeToString(l.shape) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = l.shape[0], c = l.shape[1];
  std::vector<double> probs(l.data.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(c) + " classes");
    }
    const double* in = &l.data[r * c];
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(in[j] - log_z);
    loss += log_z - in[y];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return MakeResult({}, {loss / rows}, {tl.node()},
                    [probs = std::move(probs), ys = std::move(ys), rows,
                     c](Node& self) {
                      Node& l = *self.inputs[0];
                      l.EnsureGrad();
                      const double g = self.grad[0] / rows;
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < c; ++j) {
                          const double t = static_cast<int>(j) == ys[r] ? 1.0 : 0.0;
                          l.grad[r * c + j] += g * (probs[r * c + j] - t);
                        }
                      }
                    });
}

Tensor NormalizeRows(const Tensor& tx) {
  const Node& x = Checked(tx, "normalize_rows");
  if (x.shape.empty()) throw ShapeError("normalize_rows: needs rank >= 1");
  const std::size_t c = x.shape.back();
  const std::size_t rows = x.data.size() / c;
  std::vector<double> sums(rows, 0.0);
  std::vector<double> out(x.data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) sums[r] += x.data[r * c + j];
    if (!(sums[r] > 0.0)) {
      throw NonFiniteError("normalize_rows: row " + std::to_string(r) +
                           " has non-positive sum");
    }
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = x.data[r * c + j] / sums[r];
  }
  return MakeResult(x.shape, std::move(out), {tx.node()},
                    [sums = std::move(sums), c, rows](Node& self) {
                      Node& x = *self.inputs[0];
                      x.EnsureGrad();
                      // d(x_j / S)/dx_i = (delta_ij - out_j) / S.
                      for (std::size_t r = 0; r < rows; ++r) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                          dot += self.grad[r * c + j] * self.data[r * c + j];
                        }
                        for (std::size_t i = 0; i < c; ++i) {
                          x.grad[r * c + i] += (self.grad[r * c + i] - dot) / sums[r];
                        }
                      }
                    });
}

// ---- Indexing / layout ------------------------------------------------------

Tensor Gather(const Tensor& tx, std::vector<std::size_t> indices,
              Shape out_shape) {
  const Node& x = Checked(tx, "gather");
  ValidateShape(out_shape);
  if (NumElements(out_shape) != indices.size()) {
    throw ShapeError("gather: output shape " + ShapeToString(out_shape) +
                     " does not hold " + std::to_string(indices.size()) +
                     " indices");
  }
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.data.size()) {
      throw ShapeError("gather: index " + std::to_string(indices[i]) +
                       " out of range for " + ShapeToString(x.shape));
    }
    out[i] = x.data[indices[i]];
  }
  return MakeResult(std::move(out_shape), std::move(out), {tx.node()},
                    [indices = std::move(indices)](Node& self) {
                      Node& x = *self.inputs[0];
                      x.EnsureGrad();
                      for (std::size_t i = 0; i < indices.size(); ++i) {
                        x.grad[indices[i]] += self.grad[i];
                      }
                    });
}

Tensor Reshape(const Tensor& tx, Shape shape) {
  const Node& x = Checked(tx, "reshape");
  ValidateShape(shape);
  if (NumElements(shape) != x.data.size()) {
    throw ShapeError("reshape: cannot view " + ShapeToString(x.shape) + " as " +
                     ShapeToString(shape));
  }
  return MakeResult(std::move(shape), x.data, {tx.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    x.EnsureGrad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
  });
}

Tensor SelectChannels(const Tensor& x, std::span<const int> channels) {
  if (!x.defined() || x.rank() < 1) {
    throw ShapeError("select_channels: needs rank >= 1");
  }
  const int c = x.shape().back();
  for (int ch : channels) {
    if (ch < 0 || ch >= c) {
      throw ShapeError("select_channels: channel " + std::to_string(ch) +
                       " out of range for " + ShapeToString(x.shape()));
    }
  }
  if (channels.empty()) throw ShapeError("select_channels: no channels");
  const std::size_t rows = x.size() / c;
  std::vector<std::size_t> idx;
  idx.reserve(rows * channels.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (int ch : channels) idx.push_back(r * c + ch);
  }
  Shape out = x.shape();
  out.back() = static_cast<int>(channels.size());
  return Gather(x, std::move(idx), std::move(out));
}

Tensor ConcatChannels(const Tensor& ta, const Tensor& tb) {
  const Node& a = Checked(ta, "concat_channels");
  const Node& b = Checked(tb, "concat_channels");
  if (a.shape.empty() || a.shape.size() != b.shape.size() ||
      !std::equal(a.shape.begin(), a.shape.end() - 1, b.shape.begin())) {
    throw ShapeError("concat_channels: shape mismatch " +
                     ShapeToString(a.shape) + " vs " + ShapeToString(b.shape));
  }
  const std::size_t ca = a.shape.back(), cb = b.shape.back();
  const std::size_t rows = a.data.size() / ca;
  std::vector<double> out;
  out.reserve(a.data.size() + b.data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    out.insert(out.end(), a.data.begin() + r * ca, a.data.begin() + (r + 1) * ca);
    out.insert(out.end(), b.data.begin() + r * cb, b.data.begin() + (r + 1) * cb);
  }
  Shape shape = a.shape;
  shape.back() = static_cast<int>(ca + cb);
  return MakeResult(std::move(shape), std::move(out), {ta.node(), tb.node()},
                    [ca, cb, rows](Node& self) {
                      Node& a = *self.inputs[0];
                      Node& b = *self.inputs[1];
                      if (a.requires_grad) a.EnsureGrad();
                      if (b.requires_grad) b.EnsureGrad();
                      for (std::size_t r = 0; r < rows; ++r) {
                        const double* g = &self.grad[r * (ca + cb)];
                        if (a.requires_grad) {
                          for (std::size_t j = 0; j < ca; ++j) a.grad[r * ca + j] += g[j];
                        }
                        if (b.requires_grad) {
                          for (std::size_t j = 0; j < cb; ++j) b.grad[r * cb + j] += g[ca + j];
                        }
                      }
                    });
}

Tensor GlobalAveragePool(const Tensor& x) {
  if (!x.defined() || x.rank() != 4) {
    throw ShapeError("global_average_pool: expects NHWC input, got " +
                     (x.defined() ? ShapeToString(x.shape()) : "undefined"));
  }
  const Shape& s = x.shape();
  return Mean(Reshape(x, {s[0], s[1] * s[2], s[3]}), 1);
}

}  // namespace skewsplit
