#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gaqn/rng.hpp"
#include "gaqn/tensor.hpp"

namespace gaqn {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // When false the parameter is treated as a constant by the tape.
  bool trainable = true;

  void zero_grad() {
    if (grad.shape() != value.shape())
      grad = Tensor<T>(value.shape());
    else
      grad.fill(T(0));
  }
};

/// Ordered, named collection of parameters. Addresses are stable once built.
template <class T>
class ParameterSet {
 public:
  /// Adds a parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  std::size_t add(std::string name, std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> v(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v.storage()) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(std::move(name), std::move(v));
  }

  std::size_t add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    Parameter<T> p;
    p.name = std::move(name);
    p.grad = Tensor<T>(value.shape());
    p.value = std::move(value);
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  Parameter<T>& operator[](std::string_view name) { return params_.at(lookup(name)); }
  const Parameter<T>& operator[](std::string_view name) const { return params_.at(lookup(name)); }
  bool contains(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }

  std::size_t size() const { return params_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void set_trainable(bool on) {
    for (auto& p : params_) p.trainable = on;
  }
  bool all_finite() const {
    for (const auto& p : params_)
      if (!gaqn::all_finite(p.value)) return false;
    return true;
  }
  bool values_equal(const ParameterSet& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (params_[i].name != o.params_[i].name || !(params_[i].value == o.params_[i].value)) return false;
    return true;
  }

 private:
  std::size_t lookup(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
    return it->second;
  }

  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const std::vector<int>& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  bool needs_grad() const { return tape_->needs_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of tensor operations.
///
/// Each recorded node keeps its forward value and a closure that, given the node's
/// gradient, accumulates into its parents' gradients. A tape built with gradients
/// disabled records values only.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, last_id()};
  }

  Var<T> param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = grad_enabled_ && p.trainable;
    nodes_.push_back(std::move(n));
    return {this, last_id()};
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward fn) {
    bool ng = false;
    if (grad_enabled_)
      for (const auto& p : parents) ng = ng || needs_grad(p.id());
    return record_with(std::move(value), ng, std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, Backward fn) {
    bool ng = false;
    if (grad_enabled_)
      for (const auto& p : parents) ng = ng || needs_grad(p.id());
    return record_with(std::move(value), ng, std::move(fn));
  }

  const Tensor<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param ? n.param->value : n.value;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && !value(id).empty()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }

  /// Propagates d(root)/d(node) to every reachable node and accumulates into
  /// trainable parameters. The root must be a scalar.
  void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw ShapeError("backward requires a scalar root");
    backward(root, Tensor<T>(root.shape(), T(1)));
  }

  void backward(const Var<T>& root, const Tensor<T>& seed) {
    if (seed.shape() != root.shape()) throw ShapeError("backward seed shape mismatch");
    if (!needs_grad(root.id())) return;
    Tensor<T>& g = grad(root.id());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.empty() || n.blocked) continue;
      if (n.param) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor<T>(n.param->value.shape());
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

  /// Drops all node gradients (parameter gradients are untouched).
  void clear_grads() {
    for (auto& n : nodes_) n.grad = Tensor<T>();
  }

  /// Gradient arriving at `v` is not propagated further towards its inputs.
  void block(const Var<T>& v) { nodes_[static_cast<std::size_t>(v.id())].blocked = true; }
  void unblock(const Var<T>& v) { nodes_[static_cast<std::size_t>(v.id())].blocked = false; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    Backward backward;
    bool needs_grad = false;
    bool blocked = false;
  };

  Var<T> record_with(Tensor<T> value, bool ng, Backward fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = ng;
    if (ng) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, last_id()};
  }

  int last_id() const { return static_cast<int>(nodes_.size()) - 1; }

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace gaqn
