#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xlab/tensor.hpp"

namespace xlab {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  matmul,
  conv2d,
  maxpool2d,
  relu,
  flatten,
  dropout,
  log_softmax,
  cross_entropy,
  sum,
  scale,
};

std::string_view to_string(OpKind kind);

using NodeId = std::size_t;

template <typename Scalar>
using Bindings = std::map<std::string, std::reference_wrapper<const Tensor<Scalar>>, std::less<>>;

template <typename Scalar>
using Gradients = std::map<std::string, Tensor<Scalar>, std::less<>>;

// Define-then-run computation graph with reverse-mode differentiation.
//
// Shapes are inferred and checked when a node is added. A graph instance
// supports one forward/backward pair; call reset() before running it again.
// Reductions accumulate in double regardless of Scalar.
template <typename Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;

  NodeId leaf(std::string name, Shape shape, bool requires_grad = false);

  // `b` may match `a` exactly, or be rank 1 with extent a.shape[1]; the
  // latter is broadcast over every other axis (bias add).
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  // Input C×H×W or N×C×H×W, kernels K×C×kh×kw. Cross-correlation.
  NodeId conv2d(NodeId input, NodeId kernels, std::size_t stride = 1, std::size_t padding = 0);
  // Non-overlapping window of `size`; ties go to the first element in
  // row-major scan order.
  NodeId maxpool2d(NodeId input, std::size_t size);
  NodeId relu(NodeId x);
  NodeId flatten(NodeId x);
  // Inverted dropout in training mode, identity otherwise.
  NodeId dropout(NodeId x, double rate);
  NodeId log_softmax(NodeId x);
  // Mean over rows of -sum(targets * log_probs).
  NodeId cross_entropy(NodeId log_probs, NodeId targets);
  NodeId sum(NodeId x);
  NodeId scale(NodeId x, double factor);

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  const TensorT& forward(const Bindings<Scalar>& bindings, NodeId output);
  Gradients<Scalar> backward(NodeId output);
  void reset();

  const TensorT& value(NodeId id) const;
  const Shape& shape(NodeId id) const { return node(id).shape; }
  OpKind kind(NodeId id) const { return node(id).kind; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> leaf_names(bool grad_only = false) const;

  // Test hook: replaces the gradient rule of a primitive kind. The override
  // receives (upstream gradient, node id) and returns gradients for each input.
  using GradOverride =
      std::function<std::vector<TensorT>(const Graph&, NodeId, const TensorT& upstream)>;
  void override_gradient(OpKind kind, GradOverride rule) { overrides_[kind] = std::move(rule); }

  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Shape shape;
    std::string name;
    bool requires_grad = false;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t window = 0;
    double factor = 0.0;

    TensorT value;
    TensorT grad;
    bool has_grad = false;
    // maxpool argmax positions, dropout scale mask, or conv im2col buffer
    std::vector<std::size_t> indices;
    std::vector<Scalar> mask;
    RowMatrix<double> columns;
  };

  NodeId push(Node node);
  Node& node(NodeId id);
  const Node& node(NodeId id) const;
  std::string describe(NodeId id) const;

  void eval(NodeId id, const Bindings<Scalar>& bindings);
  std::vector<TensorT> grad_rule(NodeId id, const TensorT& upstream);
  void accumulate(NodeId id, TensorT&& grad);

  std::vector<Node> nodes_;
  std::map<OpKind, GradOverride> overrides_;
  bool training_ = false;
  std::uint64_t seed_ = 0;
  bool forwarded_ = false;
  bool backwarded_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

// Numerical verification of backward() against central finite differences.
struct LeafCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct CheckReport {
  std::vector<LeafCheck> leaves;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Relative error per element is |analytic - numeric| / max(|analytic|, |numeric|, 1).
template <typename Scalar>
CheckReport gradient_check(Graph<Scalar>& graph, const Bindings<Scalar>& bindings, NodeId output,
                           double tol, double step = 1e-3);

extern template CheckReport gradient_check(Graph<float>&, const Bindings<float>&, NodeId, double, double);
extern template CheckReport gradient_check(Graph<double>&, const Bindings<double>&, NodeId, double,
                                           double);

}  // namespace xlab
