#include "regseg/tape.hpp"

#include <stdexcept>
#include <unordered_set>

namespace regseg::diff {

template <typename T>
Grid<T>& Node<T>::grad_buffer() {
  if (grad.size() != value.size()) grad = Grid<T>(value.shape(), T(0));
  return grad;
}

template <typename T>
void Node<T>::accumulate(const Grid<T>& g) {
  if (!requires_grad) return;
  require_same_shape(g.shape(), value.shape(), "accumulate");
  if (grad.size() != value.size()) {
    grad = g;
    return;
  }
  T* dst = grad.data();
  const T* src = g.data();
  for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
Var<T> Var<T>::constant(Grid<T> g) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(g);
  n->op = "constant";
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> Var<T>::leaf(Grid<T> g, std::string name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(g);
  n->requires_grad = true;
  n->name = std::move(name);
  return Var<T>(std::move(n));
}

template <typename T>
T Var<T>::item() const {
  if (node_->value.size() != 1)
    throw ShapeError("item() on non-scalar " + shape_str(node_->value.shape()));
  return node_->value[0];
}

template <typename T>
Var<T> make_result(Grid<T> value, std::vector<std::shared_ptr<Node<T>>> inputs, const char* op,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
std::map<std::string, Var<T>> bind_params(const ParamSet<T>& params, bool trainable, const std::string& prefix) {
  std::map<std::string, Var<T>> out;
  for (const auto& [name, g] : params)
    out.emplace(name, trainable ? Var<T>::leaf(g, prefix + name) : Var<T>::constant(g));
  return out;
}

template <typename T>
Gradients<T> backward(const Var<T>& loss) {
  if (!loss) throw std::invalid_argument("backward: empty loss");
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Gradients<T> out;
  if (!loss.requires_grad()) return out;

  // Iterative post-order DFS gives a topological order; each node is visited once.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->grad = Grid<T>();
  loss.node()->grad = Grid<T>(loss.shape(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) n->backward(*n);
    if (!n->name.empty()) {
      auto [pos, inserted] = out.emplace(n->name, n->grad);
      if (!inserted)
        for (std::size_t i = 0; i < n->grad.size(); ++i) pos->second[i] += n->grad[i];
    }
  }
  // Drop intermediate buffers so a second backward over the same graph starts clean.
  for (Node<T>* n : order) n->grad = Grid<T>();
  return out;
}

template <typename T>
Gradients<T> backward(const Var<T>& loss, const ParamSet<T>& params, const std::string& prefix) {
  Gradients<T> all = backward(loss);
  Gradients<T> g;
  for (const auto& [name, p] : params) {
    auto it = all.find(prefix + name);
    g.emplace(name, it != all.end() ? std::move(it->second) : Grid<T>(p.shape(), T(0)));
  }
  return g;
}

#define REGSEG_INSTANTIATE(T)                                                              \
  template struct Node<T>;                                                                 \
  template class Var<T>;                                                                   \
  template Var<T> make_result(Grid<T>, std::vector<std::shared_ptr<Node<T>>>, const char*, \
                              std::function<void(Node<T>&)>);                              \
  template std::map<std::string, Var<T>> bind_params(const ParamSet<T>&, bool, const std::string&); \
  template Gradients<T> backward(const Var<T>&);                                                  \
  template Gradients<T> backward(const Var<T>&, const ParamSet<T>&, const std::string&);

REGSEG_INSTANTIATE(float)
REGSEG_INSTANTIATE(double)
#undef REGSEG_INSTANTIATE

}  // namespace regseg::diff
