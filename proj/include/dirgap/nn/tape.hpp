#pragma once

// Reverse-mode differentiation over a linear tape.
//
// Each op appends an output node and, when any input requires a gradient, a
// closure that propagates the output gradient to its inputs. backward() runs
// the closures in reverse recording order, so gradient accumulation order is
// fixed for a given forward program.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/nn/array.hpp"

namespace dirgap::nn {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

template <class T>
class Tape {
 public:
  struct Node {
    Shape shape;
    T* value = nullptr;
    T* grad = nullptr;  // null when the node needs no gradient
    Buffer<T> own_value;
    Buffer<T> own_grad;
  };

  // With grad_enabled = false no closures are recorded and parameters are
  // treated as constants (evaluation passes).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  ~Tape() {
    auto& pool = buffer_pool();
    for (auto& n : nodes_) {
      pool.release(std::move(n->own_value));
      pool.release(std::move(n->own_grad));
    }
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Leaf bound to a store entry. Gradients accumulate straight into the
  // store; frozen entries get no gradient slot at all.
  Var param(ParameterStore<T>& store, const std::string& name) {
    auto& e = store.at(name);
    auto node = std::make_unique<Node>();
    node->shape = e.value.shape;
    node->value = e.value.data();
    if (grad_enabled_ && e.trainable) node->grad = e.grad.data();
    return push(std::move(node));
  }

  Var constant(const DenseArray<T>& array) {
    Var v = make(array.shape, false);
    std::copy(array.values.begin(), array.values.end(), node(v).value);
    return v;
  }

  Var make(const Shape& shape, bool requires_grad) {
    auto node = std::make_unique<Node>();
    node->shape = shape;
    node->own_value = buffer_pool().acquire(numel(shape));
    node->value = node->own_value.data();
    if (grad_enabled_ && requires_grad) {
      node->own_grad = buffer_pool().acquire(numel(shape));
      node->grad = node->own_grad.data();
    }
    return push(std::move(node));
  }

  // Pooled, zero-filled scratch buffer that lives as long as the tape. Ops
  // use it for values saved between forward and backward.
  T* scratch(std::size_t n) { return node(make({n}, false)).value; }

  Node& node(Var v) { return *nodes_.at(v.id); }
  const Node& node(Var v) const { return *nodes_.at(v.id); }

  const Shape& shape(Var v) const { return node(v).shape; }
  std::size_t size(Var v) const { return numel(node(v).shape); }
  bool requires_grad(Var v) const { return node(v).grad != nullptr; }

  std::span<T> value(Var v) { return {node(v).value, size(v)}; }
  std::span<const T> value(Var v) const { return {node(v).value, size(v)}; }
  std::span<T> grad(Var v) {
    auto& n = node(v);
    if (!n.grad) return {};
    return {n.grad, size(v)};
  }

  T scalar(Var v) const {
    if (size(v) != 1) throw StateError("scalar() on a non-scalar node");
    return value(v)[0];
  }

  DenseArray<T> to_array(Var v) const {
    DenseArray<T> a;
    a.shape = shape(v);
    a.values.assign(value(v).begin(), value(v).end());
    return a;
  }

  void on_backward(std::function<void()> fn) {
    if (grad_enabled_) backward_fns_.push_back(std::move(fn));
  }

  /// Propagates d(loss)/d(node) for every node recorded before `loss`.
  void backward(Var loss) {
    if (!grad_enabled_) throw StateError("backward() on a tape recorded without gradients");
    if (nodes_.empty() || loss.id >= nodes_.size())
      throw StateError("backward() called before any forward computation");
    if (backward_done_) throw StateError("backward() already ran on this tape");
    auto& n = node(loss);
    if (numel(n.shape) != 1) throw StateError("backward() needs a scalar loss");
    if (!n.grad) throw StateError("loss does not depend on any trainable parameter");
    n.grad[0] = T{1};
    for (auto it = backward_fns_.rbegin(); it != backward_fns_.rend(); ++it) (*it)();
    backward_done_ = true;
  }

 private:
  // Recycles node buffers across tapes on the same thread. Training builds
  // one tape per step with identical shapes, so after the first step every
  // buffer comes from here instead of freshly faulted pages.
  class BufferPool {
   public:
    Buffer<T> acquire(std::size_t n) {
      auto it = free_.find(n);
      if (it == free_.end() || it->second.empty()) return Buffer<T>(n, T{0});
      Buffer<T> v = std::move(it->second.back());
      it->second.pop_back();
      std::fill(v.begin(), v.end(), T{0});
      return v;
    }
    void release(Buffer<T>&& v) {
      if (v.empty()) return;
      auto& bucket = free_[v.size()];
      if (bucket.size() < kMaxPerSize) bucket.push_back(std::move(v));
    }

   private:
    static constexpr std::size_t kMaxPerSize = 64;
    std::unordered_map<std::size_t, std::vector<Buffer<T>>> free_;
  };

  static BufferPool& buffer_pool() {
    thread_local BufferPool pool;
    return pool;
  }

  Var push(std::unique_ptr<Node> node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  bool grad_enabled_ = true;
  bool backward_done_ = false;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::vector<std::function<void()>> backward_fns_;
};

}  // namespace dirgap::nn
