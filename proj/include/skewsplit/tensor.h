#ifndef SKEWSPLIT_TENSOR_H_
#define SKEWSPLIT_TENSOR_H_

// Dense row-major float64 tensors with reverse-mode automatic differentiation.
//
// Every op whose inputs require gradients records a node holding references to
// its inputs and a backward rule. Backward() linearises the graph reachable
// from a scalar loss into a GradientTape (topological order) and replays it in
// reverse, accumulating gradients additively into every tensor that requires
// them. Graphs are not shared between threads; tensors that do not require
// gradients are immutable and can be shared freely.
//
// Broadcasting is limited to scalar-with-tensor. Other alignments (bias rows,
// channel slices) are explicit ops.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace skewsplit {

using Shape = std::vector<int>;

std::size_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

namespace internal {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // Empty until first accumulation.
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad, accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  void EnsureGrad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace internal

class Tensor;

namespace internal {

// Builds an op result. When any input requires gradients the result joins the
// tape with `backward`; otherwise the rule is dropped. Used by ops defined
// outside this header (e.g. soft quantisation).
Tensor MakeResult(Shape shape, std::vector<double> data,
                  std::vector<std::shared_ptr<Node>> inputs,
                  std::function<void(Node&)> backward);

}  // namespace internal

class Tensor {
 public:
  // Empty tensor; most operations reject it.
  Tensor() = default;

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Full(Shape shape, double value, bool requires_grad = false);
  static Tensor FromData(Shape shape, std::vector<double> data,
                         bool requires_grad = false);
  // Rank-0 tensor.
  static Tensor Scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t size() const;

  std::span<const double> data() const;
  // Direct write access, intended for parameter updates and initialisation.
  std::span<double> mutable_data();
  double at(std::size_t flat_index) const { return data()[flat_index]; }
  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void ZeroGrad();
  void ClearGrad();

  // Same values, no tape participation.
  Tensor Detach() const;
  // Independent copy of the values, optionally a new leaf.
  Tensor Clone(bool requires_grad = false) const;

  // Construction hook for ops.
  static Tensor FromNode(std::shared_ptr<internal::Node> node);
  const std::shared_ptr<internal::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<internal::Node> node)
      : node_(std::move(node)) {}
  std::shared_ptr<internal::Node> node_;
};

// Trainable leaf with value semantics: copying a Parameter duplicates the
// storage, so copied models never alias each other's weights.
class Parameter {
 public:
  Parameter() = default;
  explicit Parameter(Tensor t) : t_(std::move(t)) {}
  Parameter(const Parameter& o) : t_(o.t_.Clone(o.t_.requires_grad())) {}
  Parameter& operator=(const Parameter& o) {
    if (this != &o) t_ = o.t_.Clone(o.t_.requires_grad());
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const Tensor& tensor() const { return t_; }
  Tensor* mutable_tensor() { return &t_; }

 private:
  Tensor t_;
};

// Topologically ordered list of the nodes reachable from a root. Inputs precede
// their consumers; each node appears once.
class GradientTape {
 public:
  static GradientTape Record(const Tensor& root);
  std::size_t size() const { return nodes_.size(); }
  // Seeds d(root)/d(root) = 1 and runs every backward rule once, in reverse.
  void Replay(const Tensor& root) const;

 private:
  std::vector<internal::Node*> nodes_;
};

// Populates grad on every requires_grad tensor reachable from `loss`.
// Throws ShapeError unless `loss` holds exactly one element.
void Backward(const Tensor& loss);

// ---- Elementwise ---------------------------------------------------------
// Binary ops take equal shapes, or one operand with a single element.
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Div(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& x, double factor);
Tensor AddScalar(const Tensor& x, double offset);
Tensor Relu(const Tensor& x);
Tensor Sigmoid(const Tensor& x);
Tensor Abs(const Tensor& x);

// ---- Linear algebra / convolution ----------------------------------------
// [M,K] x [K,N] -> [M,N].
Tensor MatMul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;  // Zero padding on each spatial border.
};
// x: [N,H,W,Cin] (NHWC), kernel: [K,K,Cin,Cout] -> [N,H',W',Cout].
Tensor Conv2d(const Tensor& x, const Tensor& kernel,
              Conv2dOptions options = {});
// Adds bias[C] along the last axis of x.
Tensor AddBias(const Tensor& x, const Tensor& bias);

// ---- Reductions ----------------------------------------------------------
Tensor Sum(const Tensor& x);
Tensor Sum(const Tensor& x, int axis);
Tensor Mean(const Tensor& x);
Tensor Mean(const Tensor& x, int axis);
// Subgradient routed to the first maximal element.
Tensor Max(const Tensor& x);
Tensor Max(const Tensor& x, int axis);
Tensor Min(const Tensor& x, int axis);

// ---- Probability ----------------------------------------------------------
// Softmax over the last axis.
Tensor Softmax(const Tensor& x);
// Mean over rows of -log softmax(logits)[label]. logits: [N,K].
Tensor SoftmaxCrossEntropy(const Tensor& logits, std::span<const int> labels);
// Rows of x divided by their sum along the last axis. Rows must be
// non-negative with a positive sum.
Tensor NormalizeRows(const Tensor& x);

// ---- Indexing / layout ----------------------------------------------------
// out[i] = x.flat[indices[i]], shaped `out_shape`.
Tensor Gather(const Tensor& x, std::vector<std::size_t> indices,
              Shape out_shape);
Tensor Reshape(const Tensor& x, Shape shape);
// Picks `channels` (in order) from the last axis.
Tensor SelectChannels(const Tensor& x, std::span<const int> channels);
// Concatenates along the last axis; leading dims must agree.
Tensor ConcatChannels(const Tensor& a, const Tensor& b);
// Mean over the two spatial axes of an NHWC tensor: [N,H,W,C] -> [N,C].
Tensor GlobalAveragePool(const Tensor& x);

}  // namespace skewsplit

#endif  // SKEWSPLIT_TENSOR_H_
