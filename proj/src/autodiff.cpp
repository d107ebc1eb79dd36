#include "metaepi/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "metaepi/textio.hpp"

namespace metaepi::ad {

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative extent");
    n *= d;
  }
  return n;
}

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!std::isfinite(v))
      throw std::runtime_error(strcat_msg("non-finite value in ", what));
  }
}

std::string shape_to_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(strcat_msg("shape mismatch in ", op_name(op), ": ",
                                         a.shape_str(), " vs ", b.shape_str()));
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
    throw std::invalid_argument(strcat_msg("tensor of shape ", shape_str(), " given ",
                                           data_.size(), " values"));
  check_finite(*this, "tensor construction");
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

std::span<double> Tensor::grad() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

void Tensor::accumulate_grad(std::span<const double> g) {
  if (g.size() != data_.size())
    throw std::invalid_argument("gradient size does not match tensor size");
  auto dst = grad();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

std::string Tensor::shape_str() const { return shape_to_str(shape_); }

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::ScalarMul: return "scalar-mul";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Sqrt: return "sqrt";
    case Op::Relu: return "relu";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::SqEuclidPairwise: return "squared-euclidean-pairwise";
    case Op::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::ConcatRows: return "concat-rows";
  }
  return "?";
}

NodeId Tape::push(Node n) {
  check_finite(n.value, op_name(n.op));
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::check_id(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
    throw std::out_of_range(strcat_msg("dangling tape node id ", id));
}

const Tape::Node& Tape::node(NodeId id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)];
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

NodeId Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::leaf(Tensor& param) { return leaf_detached(param, param); }

NodeId Tape::leaf_detached(const Tensor& value, Tensor& grad_sink) {
  if (value.numel() != grad_sink.numel())
    throw std::invalid_argument("leaf value and gradient sink differ in size");
  Node n;
  n.op = Op::Leaf;
  n.value = value;
  n.grad_sink = &grad_sink;
  return push(std::move(n));
}

NodeId Tape::scalar_mul(NodeId a, double c) {
  if (!std::isfinite(c)) throw std::invalid_argument("scalar-mul: non-finite scalar");
  const Tensor& x = value(a);
  Tensor out = x;
  for (double& v : out.data()) v *= c;
  Node n;
  n.op = Op::ScalarMul;
  n.inputs = {a};
  n.scalar = c;
  n.value = std::move(out);
  return push(std::move(n));
}

NodeId Tape::softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
  const Tensor& x = value(logits);
  if (x.shape().size() != 2)
    throw std::invalid_argument("softmax-cross-entropy: logits must be rank 2, got " + x.shape_str());
  int rows = x.rows(), cols = x.cols();
  if (static_cast<int>(labels.size()) != rows)
    throw std::invalid_argument(strcat_msg("softmax-cross-entropy: ", labels.size(),
                                           " labels for ", rows, " rows"));
  if (cols < 1) throw std::invalid_argument("softmax-cross-entropy: zero classes");
  double total = 0.0;
  for (int i = 0; i < rows; ++i) {
    int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= cols)
      throw std::invalid_argument(strcat_msg("softmax-cross-entropy: label ", y,
                                             " out of range [0,", cols, ")"));
    double mx = x.at(i, 0);
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x.at(i, c));
    double lse = 0.0;
    for (int c = 0; c < cols; ++c) lse += std::exp(x.at(i, c) - mx);
    total += mx + std::log(lse) - x.at(i, y);
  }
  Node n;
  n.op = Op::SoftmaxCrossEntropy;
  n.inputs = {logits};
  n.labels = std::move(labels);
  n.value = Tensor::scalar(total / rows);
  return push(std::move(n));
}

NodeId Tape::apply(Op op, std::span<const NodeId> inputs) {
  for (NodeId id : inputs) check_id(id);
  switch (op) {
    case Op::Leaf:
    case Op::ScalarMul:
    case Op::SoftmaxCrossEntropy:
      throw std::invalid_argument(strcat_msg(op_name(op), " cannot go through generic apply"));
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      if (inputs.size() != 2) throw std::invalid_argument(strcat_msg(op_name(op), " expects 2 inputs"));
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (!a.same_shape(b)) shape_error(op, a, b);
      Tensor out = a;
      auto bd = b.data();
      auto od = out.data();
      switch (op) {
        case Op::Add: for (size_t i = 0; i < od.size(); ++i) od[i] += bd[i]; break;
        case Op::Sub: for (size_t i = 0; i < od.size(); ++i) od[i] -= bd[i]; break;
        case Op::Mul: for (size_t i = 0; i < od.size(); ++i) od[i] *= bd[i]; break;
        default:      for (size_t i = 0; i < od.size(); ++i) od[i] /= bd[i]; break;
      }
      Node n;
      n.op = op;
      n.inputs.assign(inputs.begin(), inputs.end());
      n.value = std::move(out);
      return push(std::move(n));
    }
    case Op::Relu:
    case Op::Sqrt:
    case Op::Log:
    case Op::Exp: {
      if (inputs.size() != 1) throw std::invalid_argument(strcat_msg(op_name(op), " expects 1 input"));
      Tensor out = value(inputs[0]);
      for (double& v : out.data()) {
        switch (op) {
          case Op::Relu: v = v > 0.0 ? v : 0.0; break;
          case Op::Sqrt: v = std::sqrt(v); break;
          case Op::Log: v = std::log(v); break;
          default: v = std::exp(v); break;
        }
      }
      Node n;
      n.op = op;
      n.inputs.assign(inputs.begin(), inputs.end());
      n.value = std::move(out);
      return push(std::move(n));
    }
    case Op::Mean:
    case Op::Sum: {
      if (inputs.size() != 1) throw std::invalid_argument(strcat_msg(op_name(op), " expects 1 input"));
      const Tensor& x = value(inputs[0]);
      if (x.numel() == 0) throw std::invalid_argument(strcat_msg(op_name(op), " of empty tensor"));
      double s = 0.0;
      for (double v : x.data()) s += v;
      if (op == Op::Mean) s /= static_cast<double>(x.numel());
      Node n;
      n.op = op;
      n.inputs.assign(inputs.begin(), inputs.end());
      n.value = Tensor::scalar(s);
      return push(std::move(n));
    }
    case Op::MatMul: {
      if (inputs.size() != 2) throw std::invalid_argument("matmul expects 2 inputs");
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        shape_error(op, a, b);
      int m = a.rows(), k = a.cols(), p = b.cols();
      Tensor out = Tensor::zeros({m, p});
      for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
          double av = a.at(i, kk);
          if (av == 0.0) continue;
          for (int j = 0; j < p; ++j) out.at(static_cast<int64_t>(i) * p + j) += av * b.at(kk, j);
        }
      }
      Node n;
      n.op = op;
      n.inputs.assign(inputs.begin(), inputs.end());
      n.value = std::move(out);
      return push(std::move(n));
    }
    case Op::SqEuclidPairwise: {
      if (inputs.size() != 2) throw std::invalid_argument("squared-euclidean-pairwise expects 2 inputs");
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
        shape_error(op, a, b);
      int m = a.rows(), nn = b.rows(), e = a.cols();
      Tensor out = Tensor::zeros({m, nn});
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < nn; ++j) {
          double s = 0.0;
          for (int c = 0; c < e; ++c) {
            double d = a.at(i, c) - b.at(j, c);
            s += d * d;
          }
          out.at(static_cast<int64_t>(i) * nn + j) = s;
        }
      }
      Node n;
      n.op = op;
      n.inputs.assign(inputs.begin(), inputs.end());
      n.value = std::move(out);
      return push(std::move(n));
    }
    case Op::ConcatRows: {
      if (inputs.empty()) throw std::invalid_argument("concat-rows expects at least 1 input");
      int cols = value(inputs[0]).cols();
      int rows = 0;
      for (NodeId id : inputs) {
        const Tensor& t = value(id);
        if (t.shape().size() != 2 || t.cols() != cols) shape_error(op, value(inputs[0]), t);
        rows += t.rows();
      }
      Tensor out = Tensor::zeros({rows, cols});
      int64_t off = 0;
      for (NodeId id : inputs) {
        auto src = value(id).data();
        std::copy(src.begin(), src.end(), out.data().begin() + off);
        off += static_cast<int64_t>(src.size());
      }
      Node n;
      n.op = op;
      n.inputs.assign(inputs.begin(), inputs.end());
      n.value = std::move(out);
      return push(std::move(n));
    }
  }
  throw std::invalid_argument("unknown primitive");
}

void Tape::backward(NodeId loss) {
  check_id(loss);
  if (nodes_[static_cast<size_t>(loss)].value.numel() != 1)
    throw std::invalid_argument(strcat_msg("backward from non-scalar node of shape ",
                                           nodes_[static_cast<size_t>(loss)].value.shape_str()));

  std::vector<std::vector<double>> adj(static_cast<size_t>(loss) + 1);
  auto ensure = [&](NodeId id) -> std::vector<double>& {
    auto& a = adj[static_cast<size_t>(id)];
    if (a.empty()) a.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].value.numel()), 0.0);
    return a;
  };
  ensure(loss)[0] = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    const auto& a = adj[static_cast<size_t>(id)];
    if (a.empty()) continue;  // not on path to the loss
    const Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& out = n.value;
    switch (n.op) {
      case Op::Leaf:
        if (n.grad_sink && n.grad_sink->requires_grad()) n.grad_sink->accumulate_grad(a);
        break;
      case Op::Add: {
        auto& ga = ensure(n.inputs[0]);
        auto& gb = ensure(n.inputs[1]);
        for (size_t i = 0; i < a.size(); ++i) {
          ga[i] += a[i];
          gb[i] += a[i];
        }
        break;
      }
      case Op::Sub: {
        auto& ga = ensure(n.inputs[0]);
        auto& gb = ensure(n.inputs[1]);
        for (size_t i = 0; i < a.size(); ++i) {
          ga[i] += a[i];
          gb[i] -= a[i];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& y = nodes_[static_cast<size_t>(n.inputs[1])].value;
        auto& ga = ensure(n.inputs[0]);
        auto& gb = ensure(n.inputs[1]);
        for (size_t i = 0; i < a.size(); ++i) {
          ga[i] += a[i] * y.at(static_cast<int64_t>(i));
          gb[i] += a[i] * x.at(static_cast<int64_t>(i));
        }
        break;
      }
      case Op::Div: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& y = nodes_[static_cast<size_t>(n.inputs[1])].value;
        auto& ga = ensure(n.inputs[0]);
        auto& gb = ensure(n.inputs[1]);
        for (size_t i = 0; i < a.size(); ++i) {
          double yi = y.at(static_cast<int64_t>(i));
          ga[i] += a[i] / yi;
          gb[i] -= a[i] * x.at(static_cast<int64_t>(i)) / (yi * yi);
        }
        break;
      }
      case Op::ScalarMul: {
        auto& ga = ensure(n.inputs[0]);
        for (size_t i = 0; i < a.size(); ++i) ga[i] += a[i] * n.scalar;
        break;
      }
      case Op::Sqrt: {
        auto& ga = ensure(n.inputs[0]);
        for (size_t i = 0; i < a.size(); ++i) ga[i] += a[i] * 0.5 / out.at(static_cast<int64_t>(i));
        break;
      }
      case Op::Relu: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        auto& ga = ensure(n.inputs[0]);
        for (size_t i = 0; i < a.size(); ++i)
          if (x.at(static_cast<int64_t>(i)) > 0.0) ga[i] += a[i];
        break;
      }
      case Op::Log: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        auto& ga = ensure(n.inputs[0]);
        for (size_t i = 0; i < a.size(); ++i) ga[i] += a[i] / x.at(static_cast<int64_t>(i));
        break;
      }
      case Op::Exp: {
        auto& ga = ensure(n.inputs[0]);
        for (size_t i = 0; i < a.size(); ++i) ga[i] += a[i] * out.at(static_cast<int64_t>(i));
        break;
      }
      case Op::Mean: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        auto& ga = ensure(n.inputs[0]);
        double g = a[0] / static_cast<double>(x.numel());
        for (double& v : ga) v += g;
        break;
      }
      case Op::Sum: {
        auto& ga = ensure(n.inputs[0]);
        for (double& v : ga) v += a[0];
        break;
      }
      case Op::MatMul: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& y = nodes_[static_cast<size_t>(n.inputs[1])].value;
        auto& ga = ensure(n.inputs[0]);
        auto& gb = ensure(n.inputs[1]);
        int m = x.rows(), k = x.cols(), p = y.cols();
        // dX = G * Y^T ; dY = X^T * G
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < p; ++j) {
            double g = a[static_cast<size_t>(i) * p + j];
            if (g == 0.0) continue;
            for (int kk = 0; kk < k; ++kk) {
              ga[static_cast<size_t>(i) * k + kk] += g * y.at(kk, j);
              gb[static_cast<size_t>(kk) * p + j] += g * x.at(i, kk);
            }
          }
        }
        break;
      }
      case Op::SqEuclidPairwise: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& y = nodes_[static_cast<size_t>(n.inputs[1])].value;
        auto& ga = ensure(n.inputs[0]);
        auto& gb = ensure(n.inputs[1]);
        int m = x.rows(), nn = y.rows(), e = x.cols();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < nn; ++j) {
            double g = a[static_cast<size_t>(i) * nn + j];
            if (g == 0.0) continue;
            for (int c = 0; c < e; ++c) {
              double d = 2.0 * (x.at(i, c) - y.at(j, c)) * g;
              ga[static_cast<size_t>(i) * e + c] += d;
              gb[static_cast<size_t>(j) * e + c] -= d;
            }
          }
        }
        break;
      }
      case Op::SoftmaxCrossEntropy: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        auto& ga = ensure(n.inputs[0]);
        int rows = x.rows(), cols = x.cols();
        double g = a[0] / rows;
        for (int i = 0; i < rows; ++i) {
          double mx = x.at(i, 0);
          for (int c = 1; c < cols; ++c) mx = std::max(mx, x.at(i, c));
          double z = 0.0;
          for (int c = 0; c < cols; ++c) z += std::exp(x.at(i, c) - mx);
          for (int c = 0; c < cols; ++c) {
            double p = std::exp(x.at(i, c) - mx) / z;
            double onehot = (c == n.labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
            ga[static_cast<size_t>(i) * cols + c] += g * (p - onehot);
          }
        }
        break;
      }
      case Op::ConcatRows: {
        int64_t off = 0;
        for (NodeId in : n.inputs) {
          auto& gi = ensure(in);
          for (size_t i = 0; i < gi.size(); ++i) gi[i] += a[static_cast<size_t>(off) + i];
          off += static_cast<int64_t>(gi.size());
        }
        break;
      }
    }
  }
}

OptimizerState make_sgd(double lr) {
  OptimizerState s;
  s.mode = OptMode::Sgd;
  s.lr = lr;
  return s;
}

OptimizerState make_adam(double lr) {
  OptimizerState s;
  s.mode = OptMode::Adam;
  s.lr = lr;
  return s;
}

void optimizer_step(std::span<Tensor* const> params, OptimizerState& state) {
  if (state.lr <= 0.0) throw std::invalid_argument("optimizer_step: learning rate must be > 0");
  for (Tensor* p : params)
    if (!p->has_grad())
      throw std::invalid_argument("optimizer_step: parameter missing gradient");

  if (state.mode == OptMode::Adam && state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
      state.v[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
    }
  }

  state.step_count += 1;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto g = p.grad();
    auto d = p.data();
    if (state.mode == OptMode::Sgd) {
      for (size_t j = 0; j < d.size(); ++j) d[j] -= state.lr * g[j];
    } else {
      auto& m = state.m[i];
      auto& v = state.v[i];
      if (m.size() != d.size())
        throw std::invalid_argument("optimizer_step: parameter shape changed across steps");
      double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
      double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
      for (size_t j = 0; j < d.size(); ++j) {
        m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
        v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        d[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
      }
    }
    p.zero_grad();
  }
}

}  // namespace metaepi::ad
