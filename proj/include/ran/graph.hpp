#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>.
//
// Every primitive appends one node holding its output value and a backward
// rule. Nodes are appended in evaluation order, so the tape is already a
// topological order and backward() is a single reverse sweep.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>

#include "ran/tensor.hpp"

namespace ran::ad {

/// Handle to a node of one Graph.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::uint32_t>::max(); }
};

enum class Primitive : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  sum,
  affine,
  linear_rows,
  add_rows,
  transpose,
  reshape,
  conv2d,
  maxpool2,
  tanh,
  sigmoid,
  softmax,
  maxout2,
  embed,
  cross_entropy,
};

const char* to_string(Primitive p);

namespace debug {
/// Test hook: scales the input gradients produced by one primitive's
/// backward rule by `factor`. Pass std::nullopt to clear.
void inject_backward_fault(std::optional<Primitive> p, double factor = 1.5);
}  // namespace debug

template <typename T>
class Graph {
 public:
  /// Receives the node's own output value and the gradient flowing into it.
  using Backward = std::function<void(Graph&, const Tensor<T>& out, const Tensor<T>& grad_out)>;

  /// With requires_grad = false no backward rules or saved buffers are kept.
  explicit Graph(bool requires_grad = true);

  bool requires_grad() const noexcept { return requires_grad_; }

  /// Throw TensorError(non_finite) as soon as a primitive yields NaN or Inf.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }
  bool check_finite() const noexcept { return check_finite_; }

  Var constant(Tensor<T> value);
  /// Leaf that refers to params[index] without copying it. The ParamSet must
  /// outlive the graph and stay unmodified until backward() returns.
  Var param(const ParamSet<T>& params, std::size_t index);
  Var param(const ParamSet<T>& params, const std::string& name) { return param(params, params.index_of(name)); }

  const Tensor<T>& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient of the last backward() root with respect to v (empty if v was
  /// not reached).
  const Tensor<T>& grad(Var v) const { return node(v).grad; }

  /// Reverse sweep from a scalar root. Returns d(root)/d(param) for every
  /// parameter of `params`, zeros for parameters not reached.
  Gradients<T> backward(Var root, const ParamSet<T>& params);
  /// Reverse sweep only; read results with grad().
  void backward(Var root);

  std::size_t node_count() const noexcept { return nodes_.size(); }

  // Used by primitives.
  Var push(Tensor<T> value, std::initializer_list<Var> inputs, Primitive op, Backward backward);
  /// Gradient buffer of v, allocated (zeroed) on first use.
  Tensor<T>& grad_buffer(Var v);
  Primitive primitive(Var v) const { return node(v).op; }
  /// The first input of an op node (used by fused rules).
  Var first_input(Var v) const { return node(v).first_input; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Backward backward;
    Primitive op = Primitive::leaf;
    Var first_input;
    std::int64_t param_index = -1;
    bool needs_grad = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  void sweep(Var root);

  std::vector<Node> nodes_;
  bool requires_grad_ = true;
  bool check_finite_ = false;
};

// Primitives. Shapes: vectors are rank 1, matrices rank 2 (rows x cols),
// feature maps rank 3 (channels x height x width).

template <typename T> Var add(Graph<T>& g, Var a, Var b);
template <typename T> Var sub(Graph<T>& g, Var a, Var b);
/// Elementwise product.
template <typename T> Var mul(Graph<T>& g, Var a, Var b);
/// Sum of all entries, shape {1}.
template <typename T> Var sum(Graph<T>& g, Var a);

/// y = W x + b for x[n], W[m x n], b[m]; b may be an invalid Var (no bias).
template <typename T> Var affine(Graph<T>& g, Var x, Var w, Var b);
template <typename T> Var linear(Graph<T>& g, Var x, Var w) { return affine(g, x, w, Var{}); }
/// Y = X W^T for X[L x n], W[m x n]: the map W applied to every row of X.
template <typename T> Var linear_rows(Graph<T>& g, Var x, Var w);
/// X[L x n] + v[n] broadcast over rows.
template <typename T> Var add_rows(Graph<T>& g, Var x, Var v);
template <typename T> Var transpose(Graph<T>& g, Var x);
template <typename T> Var reshape(Graph<T>& g, Var x, Shape shape);

/// Cross-correlation with zero "same" padding: x[Ci x H x W],
/// k[Co x Ci x k x k] (k odd), b[Co] (optional) -> [Co x H x W].
template <typename T> Var conv2d(Graph<T>& g, Var x, Var k, Var b);
/// 2x2 window, stride 2, ceil mode. Gradient goes to the first maximum.
template <typename T> Var maxpool2(Graph<T>& g, Var x);

template <typename T> Var tanh(Graph<T>& g, Var x);
template <typename T> Var sigmoid(Graph<T>& g, Var x);
/// Over a rank-1 tensor, max-subtracted.
template <typename T> Var softmax(Graph<T>& g, Var x);
/// y_j = max(x_2j, x_2j+1); ties go to the first element.
template <typename T> Var maxout2(Graph<T>& g, Var x);
/// Row `index` of E[K x m].
template <typename T> Var embed(Graph<T>& g, std::size_t index, Var e);
/// -log(max(p[target], 1e-12)). When p comes straight from softmax the
/// gradient is sent to the logits as p - onehot.
template <typename T> Var cross_entropy(Graph<T>& g, Var p, std::size_t target);

inline constexpr double kCrossEntropyFloor = 1e-12;

}  // namespace ran::ad
