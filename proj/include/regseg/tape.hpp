#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "regseg/grid.hpp"

namespace regseg::diff {

template <typename T>
struct Node {
  Grid<T> value;
  Grid<T> grad;  // allocated during backward, same shape as value
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require it.
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::string name;  // non-empty for named leaves (parameters)
  const char* op = "leaf";

  void accumulate(const Grid<T>& g);
  Grid<T>& grad_buffer();
};

/// Handle to a recorded value. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Grid<T> g);
  static Var leaf(Grid<T> g, std::string name = {});

  const Grid<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Scalar value of a single-element Var.
  T item() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds a result node; requires_grad is inferred from the inputs.
template <typename T>
Var<T> make_result(Grid<T> value, std::vector<std::shared_ptr<Node<T>>> inputs, const char* op,
                   std::function<void(Node<T>&)> backward);

/// Ordered name -> Grid map. Networks and optimizers key everything by name.
template <typename T>
using ParamSet = std::map<std::string, Grid<T>>;

template <typename T>
using Gradients = std::map<std::string, Grid<T>>;

/// Wraps every entry of `params` as a named leaf (trainable) or constant (frozen).
/// Leaves are named prefix + key; the returned map keeps the bare keys.
template <typename T>
std::map<std::string, Var<T>> bind_params(const ParamSet<T>& params, bool trainable, const std::string& prefix = {});

/// Reverse sweep from a scalar loss. Returns gradients for every named leaf reached.
template <typename T>
Gradients<T> backward(const Var<T>& loss);

/// Gradients for exactly the entries of `params`, looked up as leaves named
/// prefix + key (zeros when unreachable). Keys come back bare.
template <typename T>
Gradients<T> backward(const Var<T>& loss, const ParamSet<T>& params, const std::string& prefix = {});

}  // namespace regseg::diff
