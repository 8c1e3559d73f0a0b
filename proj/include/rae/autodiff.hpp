#pragma once

// Reverse-mode tape. Operations record backward closures in execution order;
// backward() replays them once each, in reverse, which is a reverse
// topological order because operands are always recorded before results.
//
// A tape and the variables on it belong to one worker at a time. Independent
// tapes may run concurrently; they share nothing but read-only parameter
// snapshots.

#include <atomic>
#include <functional>
#include <memory>
#include <vector>

#include "rae/tensor.hpp"

namespace rae {

// Global switch for post-op finite checks. On by default; the benchmark
// disables it when timing raw kernel throughput.
inline std::atomic<bool> g_finite_checks{true};

template <class T>
class Tape;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";

  bool has_grad() const { return grad.size() != 0; }
  Tensor<T>& ensure_grad() {
    if (!grad.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }

  // Accumulated gradient; zeros if the variable was never reached.
  Tensor<T> grad() const { return node_->has_grad() ? node_->grad : Tensor<T>(node_->value.shape()); }

  Tape<T>* tape() const { return tape_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  friend class Tape<T>;
  Var(std::shared_ptr<Node<T>> n, Tape<T>* t) : node_(std::move(n)), tape_(t) {}

  std::shared_ptr<Node<T>> node_;
  Tape<T>* tape_ = nullptr;
};

template <class T>
class Tape {
 public:
  Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Var<T>(std::move(n), this);
  }

  Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

  // Records one computed node. `backward` accumulates into the input nodes
  // it captured; it is only retained (and only ever runs) when some input
  // requires gradients.
  Var<T> make(const char* op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs,
              std::function<void(Node<T>&)> backward) {
    if (g_finite_checks.load(std::memory_order_relaxed) && !value.all_finite())
      throw NumericsError(std::string("non-finite values produced by op '") + op + "'");
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    for (const Var<T>* in : inputs) {
      if (in->valid() && in->tape() != this) throw ContractError(std::string(op) + ": inputs from another tape");
      n->requires_grad = n->requires_grad || in->requires_grad();
    }
    Var<T> out(n, this);
    if (n->requires_grad) steps_.push_back({std::move(n), std::move(backward)});
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and replays the tape backwards. Nodes whose
  // gradient buffer was never touched are skipped: nothing downstream of
  // them reached the loss.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) throw ContractError("backward: loss is not a scalar");
    if (loss.tape() != this) throw ContractError("backward: loss from another tape");
    loss.node()->ensure_grad().fill(T{1});
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      if (it->out->has_grad()) it->bwd(*it->out);
    }
  }

  std::size_t recorded() const { return steps_.size(); }

  void clear() { steps_.clear(); }

 private:
  struct Step {
    std::shared_ptr<Node<T>> out;
    std::function<void(Node<T>&)> bwd;
  };
  std::vector<Step> steps_;
};

// Detaches a value from the gradient flow: the result is a constant leaf on
// the same tape carrying a copy of x's value.
template <class T>
Var<T> stop_gradient(const Var<T>& x) {
  return x.tape()->constant(x.value());
}

}  // namespace rae
