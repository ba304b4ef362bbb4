#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

using NodeId = std::size_t;

template <typename T>
class Graph;

/// Handle to a node on a Graph tape. Cheap to copy; valid until the graph is reset.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Append-only reverse-mode tape.
///
/// Nodes are recorded in evaluation order, so node ids are already a topological
/// order and backward is a single reverse sweep. A graph is single-use: one
/// backward per recording, then an explicit reset() before recording again.
template <typename T>
class Graph {
 public:
  /// Called during backward with the node's own id; reads grad(self) and
  /// accumulates into the node's inputs.
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var<T> constant(T value) { return leaf(Tensor<T>::scalar(value), false); }

  /// Records an op output. The backward closure is dropped when no input requires grad.
  Var<T> record(std::string_view kind, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn fn);

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::string_view kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool has_grad(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  bool has_grad(const Var<T>& v) const { return has_grad(v.id()); }
  const Tensor<T>& grad(NodeId id) const;
  const Tensor<T>& grad(const Var<T>& v) const { return grad(v.id()); }

  /// Adds g into the gradient slot of id (allocating zeros on first touch).
  void accumulate(NodeId id, const Tensor<T>& g);
  /// Mutable gradient slot for id, zero-initialised on first access.
  Tensor<T>& grad_slot(NodeId id);

  void backward(const Var<T>& seed);
  bool backward_done() const noexcept { return backward_done_; }
  void reset();

 private:
  struct Node {
    std::string kind;
    Tensor<T> value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_recordable() const;

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return graph_->requires_grad(id_);
}

// ---- primitives -----------------------------------------------------------
// Binary element-wise ops broadcast numpy-style over trailing dimensions:
// shapes are right-aligned and each aligned pair must be equal or contain a 1.

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> neg(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> pow(const Var<T>& x, T exponent);
template <typename T> Var<T> sqrt(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);

/// Full reduction to a rank-0 scalar.
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// Reductions along one axis keep that axis with size 1. Negative axes count from the end.
template <typename T> Var<T> sum(const Var<T>& x, int axis);
template <typename T> Var<T> mean(const Var<T>& x, int axis);
/// Gradient flows to the first maximal element along the axis.
template <typename T> Var<T> max(const Var<T>& x, int axis);

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> concat(std::span<const Var<T>> parts, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, std::size_t begin, std::size_t end);
/// Selects rows of table along axis 0: out[i, ...] = table[ids[i], ...].
template <typename T> Var<T> gather_rows(const Var<T>& table, std::span<const TokenId> ids);
/// mask ? a : b element-wise. a and b are each either mask-shaped or a single element.
template <typename T> Var<T> where(const Mask& mask, const Var<T>& a, const Var<T>& b);

// ---- composites -----------------------------------------------------------

/// Same value as x, no gradient path.
template <typename T> Var<T> stop_gradient(const Var<T>& x);
template <typename T> Var<T> softmax(const Var<T>& x, int axis);
template <typename T> Var<T> log_softmax(const Var<T>& x, int axis);
/// log(1 + e^x), stable for large |x|.
template <typename T> Var<T> softplus(const Var<T>& x);

template <typename T> Var<T> scale(const Var<T>& x, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& x, T c);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T> Var<T> operator-(const Var<T>& x) { return neg(x); }
template <typename T> Var<T> operator*(const Var<T>& x, T c) { return scale(x, c); }
template <typename T> Var<T> operator*(T c, const Var<T>& x) { return scale(x, c); }
template <typename T> Var<T> operator+(const Var<T>& x, T c) { return add_scalar(x, c); }
template <typename T> Var<T> operator-(const Var<T>& x, T c) { return add_scalar(x, -c); }

/// Output shape of broadcasting a with b; throws ShapeError naming both shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

/// Resolves a possibly negative axis against rank; throws ShapeError when out of range.
std::size_t normalize_axis(int axis, std::size_t rank);

}  // namespace forge
