#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "smlp/tensor.hpp"

namespace smlp {

// Weight decay and bias-free counts key off the kind.
enum class ParamKind { weight, bias, norm };

template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(ParamKind kind, Tensor<T> init) : kind(kind), value(std::move(init)) {}

  ParamKind kind = ParamKind::weight;
  Tensor<T> value;
  Tensor<T> grad;  // allocated by the first backward() or zero_grad()

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

// Named view onto a parameter living inside some layer.
template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

// Non-trainable state (batch-norm running statistics) that checkpoints must carry.
template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
using BufferList = std::vector<NamedBuffer<T>>;

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
};

namespace debug {
// Negative-control hook for the gradient checker: when set, the linear-layer
// input gradient is scaled by 1.01.
inline bool perturb_backward = false;
}  // namespace debug

// Reverse-mode record. Nodes are appended in execution order, which is a
// topological order of the computation; backward() walks them in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t node)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  // A leaf whose gradient can be read back after backward().
  Var<T> input(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && record_, nullptr);
  }

  // Parameter leaves reference the parameter's storage instead of copying it.
  Var<T> param(Parameter<T>& p) { return push(Tensor<T>(), record_, &p); }

  // Records an op output. `backward` is only kept when some input needs a gradient.
  Var<T> record(Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(out), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(Tensor<T> out, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    }
    Var<T> v = push(std::move(out), needs, nullptr);
    if (needs) {
      auto& node = nodes_.back();
      node.inputs.reserve(inputs.size());
      for (const auto& in : inputs) node.inputs.push_back(in.id);
      node.backward = std::move(backward);
    }
    return v;
  }

  const Tensor<T>& value(Var<T> v) const { return stored(nodes_.at(v.id)); }
  const Tensor<T>& value(std::size_t id) const { return stored(nodes_[id]); }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input_id(std::size_t node, std::size_t k) const { return nodes_[node].inputs[k]; }

  // Gradient flowing into `node` during backward().
  const Tensor<T>& grad_of(std::size_t node) const { return *nodes_[node].grad; }

  bool has_grad(Var<T> v) const { return nodes_.at(v.id).grad.has_value(); }

  // Gradient of the last backward() w.r.t. a recorded value; zeros if unreached.
  Tensor<T> grad(Var<T> v) const {
    const auto& node = nodes_.at(v.id);
    return node.grad ? *node.grad : Tensor<T>(stored(node).shape());
  }

  // Adds `g` into the gradient slot of node `id` (fan-out accumulates).
  void accumulate(std::size_t id, Tensor<T> g) {
    auto& node = nodes_[id];
    if (!node.requires_grad) return;
    if (g.shape() != stored(node).shape()) {
      throw ShapeError("backward: gradient shape " + smlp::to_string(g.shape()) +
                       " does not match value shape " + smlp::to_string(stored(node).shape()));
    }
    if (!node.grad) {
      node.grad = std::move(g);
      return;
    }
    auto dst = node.grad->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Propagates d(loss)/d(node) to every node; parameter gradients are added
  // into Parameter::grad.
  void backward(Var<T> loss) {
    if (!record_) throw std::logic_error("backward: tape was created with recording disabled");
    auto& root = nodes_.at(loss.id);
    if (stored(root).size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + smlp::to_string(stored(root).shape()));
    }
    for (auto& n : nodes_) n.grad.reset();
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(stored(root).shape(), T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (!node.grad) continue;
      if (node.backward) node.backward(*this, id);
      if (node.param) {
        auto& pg = node.param->grad;
        if (pg.shape() != node.param->value.shape()) pg = Tensor<T>(node.param->value.shape());
        auto dst = pg.data();
        auto src = node.grad->data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  const Tensor<T>& stored(const Node& n) const { return n.param ? n.param->value : n.value; }

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.param = param;
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace smlp
