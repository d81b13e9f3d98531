#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seqft/errors.hpp"

namespace seqft {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Row-major dense storage. Every tensor is held as a 2-D matrix view of its
/// shape: rank 0 and 1 are a single row, rank >= 2 is shape[0] rows by the
/// product of the remaining dims.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline Index view_rows(const Shape& shape) { return shape.size() < 2 ? 1 : shape[0]; }

inline Index view_cols(const Shape& shape) {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  return shape[0] > 0 ? numel(shape) / shape[0] : 0;
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Scalar>
struct Node {
  Shape shape;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(const Matrix<Scalar>&)> backward;
};

template <typename Scalar, typename Expr>
void accumulate(Node<Scalar>& node, const Expr& g) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense tensor participating in a dynamic reverse-mode tape.
///
/// Tensor is a handle: copies share the underlying node. Use clone() for an
/// independent leaf. Operations on tensors that require grad record a
/// backward closure; the tape is rebuilt on every forward pass and released
/// when the last handle to the result goes away.
template <typename Scalar>
class Tensor {
 public:
  using Mat = Matrix<Scalar>;
  using NodeT = detail::Node<Scalar>;

  Tensor() = default;

  Tensor(Shape shape, Mat value, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (value.rows() != view_rows(shape) || value.cols() != view_cols(shape)) {
      throw DimensionError("tensor storage " + std::to_string(value.rows()) + "x" +
                           std::to_string(value.cols()) + " does not match shape " +
                           to_string(shape));
    }
    for (Index d : shape) {
      if (d < 1) throw DimensionError("tensor dims must be positive, got " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Mat v = Mat::Zero(view_rows(shape), view_cols(shape));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor constant(Shape shape, Scalar c, bool requires_grad = false) {
    Mat v = Mat::Constant(view_rows(shape), view_cols(shape), c);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& values,
                            bool requires_grad = false) {
    if (static_cast<Index>(values.size()) != numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    Mat v = Eigen::Map<const Mat>(values.data(), view_rows(shape), view_cols(shape));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(Scalar s, bool requires_grad = false) {
    return constant(Shape{}, s, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index ndim() const { return static_cast<Index>(node_->shape.size()); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }

  const Mat& value() const { return node_->value; }
  /// In-place access for leaves (optimizers, initializers, loaders).
  Mat& data() { return node_->value; }
  Scalar item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Mat& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  /// Independent leaf with the same value and requires_grad flag.
  Tensor clone() const { return Tensor(shape(), value(), requires_grad()); }
  /// Independent leaf that does not require grad.
  Tensor detach() const { return Tensor(shape(), value(), false); }

  const std::shared_ptr<NodeT>& node() const { return node_; }

  /// Reverse-mode sweep from this scalar. Leaf grads accumulate across calls;
  /// interior grads are recomputed each call.
  void backward() const {
    if (size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(shape()));
    }
    if (!requires_grad()) {
      throw ContractError("backward() on a tensor that does not require grad");
    }
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        NodeT* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (NodeT* n : order) {
      if (n->backward) n->grad.resize(0, 0);
    }
    detail::accumulate(*node_, Mat::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(n->grad);
    }
  }

  /// Builds an op result. `backward` receives the upstream grad and is only
  /// recorded when grad mode is on and some parent requires grad.
  static Tensor make_result(Shape shape, Mat value, std::vector<Tensor> parents,
                            std::function<void(const Mat&)> backward) {
    Tensor out(std::move(shape), std::move(value), false);
    if (!detail::grad_mode_flag()) return out;
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<NodeT> node_;
};

}  // namespace seqft
