#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
// The tape is define-by-run: values are computed eagerly when an op is
// recorded, backward() replays the recorded nodes in reverse. Gradients
// accumulate into the Tensor objects bound at leaf creation; callers zero
// them explicitly (optimizer_step does this after applying an update).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace metaepi::ad {

class Tensor {
 public:
  Tensor() = default;
  // Throws if product(shape) != data.size() or any entry is non-finite.
  Tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor scalar(double v);
  // i.i.d. N(0, stddev^2) entries drawn from the supplied callable.
  template <typename Rng>
  static Tensor randn(std::vector<int> shape, double stddev, Rng& rng, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data_) v = stddev * rng.next_gaussian();
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int rows() const { return shape_.empty() ? 1 : shape_[0]; }
  int cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

  bool has_grad() const { return !grad_.empty(); }
  // Grad buffer, allocated zero-filled on first access.
  std::span<double> grad();
  std::span<const double> grad() const { return grad_; }
  void zero_grad();
  void accumulate_grad(std::span<const double> g);

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

enum class Op {
  Leaf,
  MatMul,
  Add,
  Sub,
  ScalarMul,
  Mul,
  Div,
  Sqrt,
  Relu,
  Mean,
  Sum,
  SqEuclidPairwise,
  SoftmaxCrossEntropy,
  Log,
  Exp,
  ConcatRows,
};

const char* op_name(Op op);

using NodeId = int;

class Tape {
 public:
  // Leaf whose gradient is discarded (inputs, constants, one-hot masks...).
  NodeId constant(Tensor value);
  // Leaf bound to a parameter: backward() accumulates into param.grad.
  // The referenced tensor must outlive the tape.
  NodeId leaf(Tensor& param);
  // Leaf that evaluates with `value` but routes gradients into `grad_sink`
  // (the first-order MAML outer step: adapted values, initializer grads).
  NodeId leaf_detached(const Tensor& value, Tensor& grad_sink);

  // Generic primitive application; validates shapes, computes the forward
  // value and records the node. Attribute-carrying primitives (ScalarMul,
  // SoftmaxCrossEntropy) go through their dedicated wrappers below.
  NodeId apply(Op op, std::span<const NodeId> inputs);

  NodeId matmul(NodeId a, NodeId b) { return apply2(Op::MatMul, a, b); }
  NodeId add(NodeId a, NodeId b) { return apply2(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return apply2(Op::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return apply2(Op::Mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return apply2(Op::Div, a, b); }
  NodeId sq_euclid_pairwise(NodeId a, NodeId b) { return apply2(Op::SqEuclidPairwise, a, b); }
  NodeId relu(NodeId a) { return apply1(Op::Relu, a); }
  NodeId sqrt(NodeId a) { return apply1(Op::Sqrt, a); }
  NodeId log(NodeId a) { return apply1(Op::Log, a); }
  NodeId exp(NodeId a) { return apply1(Op::Exp, a); }
  NodeId mean(NodeId a) { return apply1(Op::Mean, a); }
  NodeId sum(NodeId a) { return apply1(Op::Sum, a); }
  NodeId concat_rows(std::span<const NodeId> parts) { return apply(Op::ConcatRows, parts); }

  NodeId scalar_mul(NodeId a, double c);
  // Mean over rows of per-row cross-entropy; labels[i] in [0, cols).
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels);

  const Tensor& value(NodeId id) const;
  size_t size() const { return nodes_.size(); }

  // Reverse sweep seeding d(loss)/d(loss) = 1. Accumulates into the grad
  // slots of bound leaves; calling twice without zeroing doubles them.
  void backward(NodeId loss);

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Tensor value;
    double scalar = 0.0;          // ScalarMul
    std::vector<int> labels;      // SoftmaxCrossEntropy
    Tensor* grad_sink = nullptr;  // bound leaves
  };

  NodeId apply1(Op op, NodeId a) {
    NodeId in[1] = {a};
    return apply(op, in);
  }
  NodeId apply2(Op op, NodeId a, NodeId b) {
    NodeId in[2] = {a, b};
    return apply(op, in);
  }
  NodeId push(Node n);
  const Node& node(NodeId id) const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
};

enum class OptMode { Sgd, Adam };

// Per-parameter first/second moment buffers are lazily sized on the first
// step; callers must pass the same parameter list, in the same order, on
// every step.
struct OptimizerState {
  OptMode mode = OptMode::Adam;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

OptimizerState make_sgd(double lr);
OptimizerState make_adam(double lr);

// Applies one update to every parameter from its populated grad, then zeroes
// the grads. Sgd: p -= lr * g. Adam: bias-corrected adaptive moments.
void optimizer_step(std::span<Tensor* const> params, OptimizerState& state);

}  // namespace metaepi::ad
