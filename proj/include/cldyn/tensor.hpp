#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace cldyn {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

/// Dense tensor extents, rank <= 4. Maps are C x H x W, kernels
/// C_out x C_in x k x k, vectors rank 1, scalars rank 0.
struct Shape {
  std::array<long, 4> dims{1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<long> ds) {
    if (ds.size() > 4) throw ShapeError("rank > 4 unsupported");
    rank = static_cast<int>(ds.size());
    int i = 0;
    for (long d : ds) {
      if (d <= 0) throw ShapeError("non-positive extent");
      dims[static_cast<size_t>(i++)] = d;
    }
  }

  long operator[](int i) const { return dims[static_cast<size_t>(i)]; }
  long numel() const {
    long n = 1;
    for (int i = 0; i < rank; ++i) n *= dims[static_cast<size_t>(i)];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (dims[static_cast<size_t>(i)] != o.dims[static_cast<size_t>(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < rank; ++i) os << (i ? "," : "") << dims[static_cast<size_t>(i)];
    os << ")";
    return os.str();
  }
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// One recorded value in a computation. Nodes produced by operations keep
/// shared handles to their inputs plus a closure that scatters the node's
/// gradient back into them, so a root together with its ancestors forms the
/// record the backward pass replays in reverse topological order.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;   // allocated on demand, same length as value
  bool requires_grad = false; // trainable leaf
  bool needs_grad = false;    // on a path from a trainable leaf
  bool backward_done = false; // a root may drive backward only once
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

/// Value-semantics handle to a TensorNode.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return from_data(s, std::vector<double>(static_cast<size_t>(s.numel()), 0.0), requires_grad);
  }
  static Tensor full(const Shape& s, double v, bool requires_grad = false) {
    return from_data(s, std::vector<double>(static_cast<size_t>(s.numel()), v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data(Shape{}, std::vector<double>{v}, requires_grad);
  }
  static Tensor from_data(const Shape& s, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<long>(data.size()) != s.numel())
      throw ShapeError("data length " + std::to_string(data.size()) + " != numel of " + s.str());
    auto n = std::make_shared<TensorNode>();
    n->shape = s;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long numel() const { return node_->shape.numel(); }
  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  /// Value of a scalar (rank-0 or single-element) tensor.
  double item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape().str());
    return node_->value[0];
  }

  void set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    node_->needs_grad = rg || !node_->parents.empty();
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  NodePtr node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds the node for an operation result. Parents and the backprop closure
/// are recorded only when some input can receive a gradient; constant
/// subgraphs are pruned at construction.
inline Tensor make_op(const Shape& s, std::vector<double> value,
                      std::vector<NodePtr> parents,
                      std::function<void(TensorNode&)> backprop) {
  Tensor out = Tensor::from_data(s, std::move(value), false);
  bool needs = false;
  for (const auto& p : parents)
    if (p && p->needs_grad) needs = true;
  if (needs) {
    out.node()->needs_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Gradients accumulate into the
/// grad buffers of every reachable node; trainable leaves keep theirs until
/// zero_grad. A root can be consumed once per forward construction.
inline void backward(const Tensor& root) {
  TensorNode* r = root.raw();
  if (!r) throw Error("backward on undefined tensor");
  if (r->value.size() != 1) throw ShapeError("backward root must be scalar, got " + root.shape().str());
  if (r->backward_done) throw Error("backward called twice on the same record");
  r->backward_done = true;
  if (!r->needs_grad && !r->requires_grad) return;  // constant graph, nothing to do

  // iterative post-order over parents
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx].get();
      ++idx;
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : topo) n->ensure_grad();
  r->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

inline void zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace cldyn
