#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "multiverse/errors.hpp"
#include "multiverse/tensor.hpp"

namespace mvt {

// Named trainable arrays. Iteration order is lexicographic by name so every
// consumer (optimizer, checkpoint writer, gradient checker) sees the same
// ordering regardless of insertion order.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
  };

  ParameterStore() = default;
  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  void add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (entries_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
    if (!value.all_finite()) throw NumericError("non-finite initial value for parameter " + name);
    entries_.emplace(name, Entry{std::move(value), trainable});
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return entry(name).value; }
  const Shape& shape(const std::string& name) const { return entry(name).value.shape(); }
  bool trainable(const std::string& name) const { return entry(name).trainable; }

  // Values are mutable; shapes are not.
  std::span<T> values(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second.value.values();
  }

  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  double squared_norm(bool trainable_only = true) const {
    double s = 0.0;
    for (const auto& [_, e] : entries_) {
      if (trainable_only && !e.trainable) continue;
      for (T v : e.value.values()) s += static_cast<double>(v) * static_cast<double>(v);
    }
    return s;
  }

  std::uint64_t seed() const noexcept { return seed_; }
  void set_seed(std::uint64_t s) noexcept { seed_ = s; }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out(seed_);
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || ia->second.trainable != ib->second.trainable ||
          !(ia->second.value == ib->second.value))
        return false;
    }
    return true;
  }

 private:
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
  std::uint64_t seed_ = 0;
};

struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
  bool valid() const noexcept { return id != none; }
};

// Reverse-mode tape. Each op appends a node holding its value and, when any
// input needs a gradient, a closure that pushes the node's gradient back to
// its inputs. Nodes are only ever appended, so a Var stays valid for the
// lifetime of the graph.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>&)>;

  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const noexcept { return record_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  // Leaf that receives a gradient; used for checks with respect to inputs.
  Var input(Tensor<T> value) { return push(std::move(value), record_, {}); }

  // Leaf bound to a named parameter. Repeated requests share one node, so
  // gradients from every use site accumulate in one place.
  Var param(const ParameterStore<T>& store, const std::string& name) {
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var{it->second};
    const bool needs = record_ && store.trainable(name);
    Var v = push(store.get(name), needs, {});
    param_nodes_.emplace(name, v.id);
    return v;
  }

  Var emit(Tensor<T> value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  Var emit(Tensor<T> value, const std::vector<Var>& inputs, Backward fn) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of v, zero-initialized on first access.
  Tensor<T>& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>* grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? nullptr : &n.grad;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) throw ShapeError("backward expects a scalar loss");
    if (!requires_grad(loss)) return;
    grad_ref(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  // Gradients of every parameter node; parameters untouched by the loss
  // get zeros so callers can rely on the full name set.
  std::map<std::string, Tensor<T>> param_grads() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, id] : param_nodes_) {
      const Node& n = nodes_[id];
      out.emplace(name, n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad);
    }
    return out;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor<T> value, bool needs, Backward fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, needs, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
};

}  // namespace mvt
