#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every op records a closure that accumulates the node's
// gradient into its parents; Tensor::backward() replays them in reverse
// topological order.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sedan {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor data size " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> values(numel(shape), 0.0);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor full(Shape shape, double fill) {
    std::vector<double> values(numel(shape), fill);
    return from(std::move(shape), std::move(values));
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  static Tensor from_matrix(const Eigen::MatrixXd& m) {
    std::vector<double> values(static_cast<std::size_t>(m.size()));
    MatrixMap(values.data(), m.rows(), m.cols()) = m;
    return from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(values));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  const std::vector<double>& values() const { return node_->value; }
  /// Direct write access; intended for parameter initialization and updates.
  std::vector<double>& mutable_values() { return node_->value; }
  double at(std::size_t i) const { return node_->value.at(i); }

  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  bool requires_grad() const { return node_->requires_grad; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  Eigen::MatrixXd to_matrix() const {
    if (rank() != 2) throw ShapeError("to_matrix() requires rank 2, got " + shape_string(shape()));
    return ConstMatrixMap(node_->value.data(), static_cast<Eigen::Index>(dim(0)),
                          static_cast<Eigen::Index>(dim(1)));
  }

  /// A leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return from(shape(), values(), false); }

  /// A new independent leaf parameter with copied values.
  Tensor clone_parameter() const { return from(shape(), values(), true); }

  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar, got " + shape_string(shape()));
    if (!requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [current, next_parent] = stack.back();
      if (next_parent < current->parents.size()) {
        Node* parent = current->parents[next_parent++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(current);
        stack.pop_back();
      }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  NodePtr node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t length;
  std::size_t inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis out of range for shape " + shape_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Builds an op node from an externally computed value. `backward` receives
/// the node (with its gradient filled) and must accumulate into parents.
inline Tensor custom_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backward) {
  return detail::make_op(std::move(shape), std::move(value), std::move(inputs), std::move(backward));
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  return detail::make_op(a.shape(), std::move(out), {a}, [an = a.node(), factor](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * factor;
  });
}

inline Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.values());
  for (double& v : out) v += offset;
  return detail::make_op(a.shape(), std::move(out), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

/// x + b where b's shape is a suffix of x's shape (bias, positional tables).
inline Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw ShapeError("add_broadcast: " + shape_string(bs) + " is not a suffix of " + shape_string(xs));
  }
  const std::size_t inner = b.size();
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i % inner];
  return detail::make_op(xs, std::move(out), {x, b}, [xn = x.node(), bn = b.node(), inner](Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i % inner] += self.grad[i];
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.values()[i]);
  return detail::make_op(a.shape(), std::move(out), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
    }
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  return detail::make_op(a.shape(), out, {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.value[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
  return detail::make_op(a.shape(), std::move(out), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / an->value[i];
  });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return detail::make_op({}, {total}, {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (double& g : an->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Mean over one axis; the axis is removed from the shape.
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto split = detail::split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(split.outer * split.inner, 0.0);
  const double inv = 1.0 / static_cast<double>(split.length);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t l = 0; l < split.length; ++l)
      for (std::size_t i = 0; i < split.inner; ++i)
        out[o * split.inner + i] += a.values()[(o * split.length + l) * split.inner + i] * inv;
  return detail::make_op(std::move(shape), std::move(out), {a}, [an = a.node(), split, inv](Node& self) {
    an->ensure_grad();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t l = 0; l < split.length; ++l)
        for (std::size_t i = 0; i < split.inner; ++i)
          an->grad[(o * split.length + l) * split.inner + i] += self.grad[o * split.inner + i] * inv;
  });
}

/// Mean of squared differences over all elements.
inline Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  detail::require_same_shape(prediction, target, "mse_loss");
  const double inv = 1.0 / static_cast<double>(prediction.size());
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction.values()[i] - target.values()[i];
    total += d * d;
  }
  return detail::make_op({}, {total * inv}, {prediction, target},
                         [pn = prediction.node(), tn = target.node(), inv](Node& self) {
                           for (std::size_t i = 0; i < pn->value.size(); ++i) {
                             const double g = 2.0 * (pn->value[i] - tn->value[i]) * inv * self.grad[0];
                             if (pn->requires_grad) {
                               pn->ensure_grad();
                               pn->grad[i] += g;
                             }
                             if (tn->requires_grad) {
                               tn->ensure_grad();
                               tn->grad[i] -= g;
                             }
                           }
                         });
}

// ---------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  return detail::make_op(std::move(shape), a.values(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

/// [A, B, C, D] -> [A, C, B, D]
inline Tensor swap_axes12(const Tensor& a) {
  if (a.rank() != 4) throw ShapeError("swap_axes12 requires rank 4, got " + shape_string(a.shape()));
  const std::size_t A = a.dim(0), B = a.dim(1), C = a.dim(2), D = a.dim(3);
  std::vector<double> out(a.size());
  auto src_index = [=](std::size_t i, std::size_t b, std::size_t c, std::size_t d) {
    return ((i * B + b) * C + c) * D + d;
  };
  auto dst_index = [=](std::size_t i, std::size_t b, std::size_t c, std::size_t d) {
    return ((i * C + c) * B + b) * D + d;
  };
  for (std::size_t i = 0; i < A; ++i)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t d = 0; d < D; ++d) out[dst_index(i, b, c, d)] = a.values()[src_index(i, b, c, d)];
  return detail::make_op({A, C, B, D}, std::move(out), {a},
                         [an = a.node(), A, B, C, D, src_index, dst_index](Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < A; ++i)
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t d = 0; d < D; ++d)
                                   an->grad[src_index(i, b, c, d)] += self.grad[dst_index(i, b, c, d)];
                         });
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto split = detail::split_axis(a.shape(), axis);
  if (start + length > split.length) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of length " + std::to_string(split.length));
  }
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(split.outer * length * split.inner);
  for (std::size_t o = 0; o < split.outer; ++o) {
    const auto* src = a.values().data() + (o * split.length + start) * split.inner;
    std::copy(src, src + length * split.inner, out.data() + o * length * split.inner);
  }
  return detail::make_op(std::move(shape), std::move(out), {a},
                         [an = a.node(), split, start, length](Node& self) {
                           an->ensure_grad();
                           for (std::size_t o = 0; o < split.outer; ++o) {
                             auto* dst = an->grad.data() + (o * split.length + start) * split.inner;
                             const auto* g = self.grad.data() + o * length * split.inner;
                             for (std::size_t i = 0; i < length * split.inner; ++i) dst[i] += g[i];
                           }
                         });
}

/// Selects index `i` along axis 0 and drops that axis.
inline Tensor select(const Tensor& a, std::size_t i) {
  Shape rest(a.shape().begin() + 1, a.shape().end());
  return reshape(slice(a, 0, i, 1), std::move(rest));
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of no tensors");
  Shape shape = parts.front().shape();
  std::size_t total = 0;
  std::vector<detail::AxisSplit> splits;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    probe[axis] = shape[axis];
    if (probe != shape) throw ShapeError("concat: incompatible shapes " + shape_string(p.shape()));
    splits.push_back(detail::split_axis(p.shape(), axis));
    total += p.dim(axis);
  }
  shape[axis] = total;
  const std::size_t outer = splits.front().outer;
  const std::size_t inner = splits.front().inner;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    offsets.push_back(offset);
    const std::size_t len = splits[k].length;
    for (std::size_t o = 0; o < outer; ++o) {
      const auto* src = parts[k].values().data() + o * len * inner;
      std::copy(src, src + len * inner, out.data() + (o * total + offset) * inner);
    }
    offset += len;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_op(std::move(shape), std::move(out), parts,
                         [nodes, splits, offsets, outer, inner, total](Node& self) {
                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                             if (!nodes[k]->requires_grad) continue;
                             nodes[k]->ensure_grad();
                             const std::size_t len = splits[k].length;
                             for (std::size_t o = 0; o < outer; ++o) {
                               const auto* g = self.grad.data() + (o * total + offsets[k]) * inner;
                               auto* dst = nodes[k]->grad.data() + o * len * inner;
                               for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                             }
                           }
                         });
}

inline Tensor stack(const std::vector<Tensor>& parts) {
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, 0);
}

// ---------------------------------------------------------------- linear algebra

/// x[..., k] * w[k, n] (+ b[n])
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b = nullptr) {
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(w.shape()));
  }
  const auto k = static_cast<Eigen::Index>(w.dim(0));
  const auto n = static_cast<Eigen::Index>(w.dim(1));
  const auto rows = static_cast<Eigen::Index>(x.size() / w.dim(0));
  if (b && (b->size() != static_cast<std::size_t>(n))) throw ShapeError("linear: bias size mismatch");
  Shape shape = x.shape();
  shape.back() = w.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows * n));
  MatrixMap y(out.data(), rows, n);
  y.noalias() = ConstMatrixMap(x.values().data(), rows, k) * ConstMatrixMap(w.values().data(), k, n);
  if (b) y.rowwise() += ConstVectorMap(b->values().data(), n).transpose();
  std::vector<Tensor> inputs{x, w};
  if (b) inputs.push_back(*b);
  NodePtr bn = b ? b->node() : nullptr;
  return detail::make_op(std::move(shape), std::move(out), inputs,
                         [xn = x.node(), wn = w.node(), bn, rows, k, n](Node& self) {
                           ConstMatrixMap gy(self.grad.data(), rows, n);
                           if (xn->requires_grad) {
                             xn->ensure_grad();
                             MatrixMap(xn->grad.data(), rows, k).noalias() +=
                                 gy * ConstMatrixMap(wn->value.data(), k, n).transpose();
                           }
                           if (wn->requires_grad) {
                             wn->ensure_grad();
                             MatrixMap(wn->grad.data(), k, n).noalias() +=
                                 ConstMatrixMap(xn->value.data(), rows, k).transpose() * gy;
                           }
                           if (bn && bn->requires_grad) {
                             bn->ensure_grad();
                             VectorMap(bn->grad.data(), n) += gy.colwise().sum().transpose();
                           }
                         });
}

namespace detail {
inline Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: expected [G,n,k] x [G,...], got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t G = a.dim(0);
  const auto n = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto m = static_cast<Eigen::Index>(transpose_b ? b.dim(1) : b.dim(2));
  if (static_cast<Eigen::Index>(transpose_b ? b.dim(2) : b.dim(1)) != k) {
    throw ShapeError("bmm: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(G * static_cast<std::size_t>(n * m));
  for (std::size_t g = 0; g < G; ++g) {
    ConstMatrixMap A(a.values().data() + g * n * k, n, k);
    MatrixMap C(out.data() + g * n * m, n, m);
    if (transpose_b) {
      C.noalias() = A * ConstMatrixMap(b.values().data() + g * m * k, m, k).transpose();
    } else {
      C.noalias() = A * ConstMatrixMap(b.values().data() + g * k * m, k, m);
    }
  }
  return make_op({G, static_cast<std::size_t>(n), static_cast<std::size_t>(m)}, std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), G, n, k, m, transpose_b](Node& self) {
                   if (an->requires_grad) an->ensure_grad();
                   if (bn->requires_grad) bn->ensure_grad();
                   for (std::size_t g = 0; g < G; ++g) {
                     ConstMatrixMap gc(self.grad.data() + g * n * m, n, m);
                     ConstMatrixMap A(an->value.data() + g * n * k, n, k);
                     if (transpose_b) {
                       ConstMatrixMap B(bn->value.data() + g * m * k, m, k);
                       if (an->requires_grad) MatrixMap(an->grad.data() + g * n * k, n, k).noalias() += gc * B;
                       if (bn->requires_grad)
                         MatrixMap(bn->grad.data() + g * m * k, m, k).noalias() += gc.transpose() * A;
                     } else {
                       ConstMatrixMap B(bn->value.data() + g * k * m, k, m);
                       if (an->requires_grad)
                         MatrixMap(an->grad.data() + g * n * k, n, k).noalias() += gc * B.transpose();
                       if (bn->requires_grad)
                         MatrixMap(bn->grad.data() + g * k * m, k, m).noalias() += A.transpose() * gc;
                     }
                   }
                 });
}
}  // namespace detail

/// [G,n,k] x [G,k,m] -> [G,n,m]
inline Tensor bmm(const Tensor& a, const Tensor& b) { return detail::batched_matmul(a, b, false); }
/// [G,n,k] x [G,m,k]^T -> [G,n,m]
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) { return detail::batched_matmul(a, b, true); }

/// [n,k] x [k,m] for rank-2 tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
  auto out = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
  return reshape(out, {a.dim(0), b.dim(1)});
}

/// [n,k] x [m,k]^T for rank-2 tensors.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_nt expects rank-2 tensors");
  auto out = bmm_nt(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
  return reshape(out, {a.dim(0), b.dim(0)});
}

// ---------------------------------------------------------------- normalization / softmax

/// Softmax over the last axis. With `causal`, the last two axes are a square
/// score matrix and entries above the diagonal are excluded.
inline Tensor softmax(const Tensor& x, bool causal = false) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  if (causal && (x.rank() < 2 || x.dim(x.rank() - 2) != width)) {
    throw ShapeError("causal softmax requires square trailing axes, got " + shape_string(x.shape()));
  }
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t limit = causal ? (r % width) + 1 : width;
    const double* in = x.values().data() + r * width;
    double* o = out.data() + r * width;
    double mx = *std::max_element(in, in + limit);
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < limit; ++j) o[j] /= z;
  }
  return detail::make_op(x.shape(), std::move(out), {x}, [xn = x.node(), width, rows](Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * width;
      const double* g = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += y[j] * g[j];
      double* dx = xn->grad.data() + r * width;
      for (std::size_t j = 0; j < width; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& x) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = in[j] - lse;
  }
  return detail::make_op(x.shape(), std::move(out), {x}, [xn = x.node(), width, rows](Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * width;
      const double* g = self.grad.data() + r * width;
      double gsum = 0.0;
      for (std::size_t j = 0; j < width; ++j) gsum += g[j];
      double* dx = xn->grad.data() + r * width;
      for (std::size_t j = 0; j < width; ++j) dx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t width = x.shape().back();
  if (gamma.size() != width || beta.size() != width) throw ShapeError("layer_norm: affine size mismatch");
  const std::size_t rows = x.size() / width;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      xhat[r * width + j] = (in[j] - mu) * inv_std[r];
      out[r * width + j] = xhat[r * width + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  return detail::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
       inv_std = std::move(inv_std), width, rows](Node& self) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        std::vector<double> dxhat(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * width;
          const double* xh = xhat.data() + r * width;
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * xh[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
            dxhat[j] = g[j] * gn->value[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
          }
          if (!xn->requires_grad) continue;
          mean_d /= static_cast<double>(width);
          mean_dx /= static_cast<double>(width);
          double* dx = xn->grad.data() + r * width;
          for (std::size_t j = 0; j < width; ++j) dx[j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
      });
}

/// Divides each row (last axis) by its Euclidean norm. Zero rows are an error.
inline Tensor l2_normalize(const Tensor& x) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  std::vector<double> out(x.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * width;
    double sq = 0.0;
    for (std::size_t j = 0; j < width; ++j) sq += in[j] * in[j];
    norms[r] = std::sqrt(sq);
    if (!(norms[r] > 0.0)) throw std::domain_error("l2_normalize: zero-norm row has no direction");
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = in[j] / norms[r];
  }
  return detail::make_op(x.shape(), std::move(out), {x},
                         [xn = x.node(), norms = std::move(norms), width, rows](Node& self) {
                           xn->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* y = self.value.data() + r * width;
                             const double* g = self.grad.data() + r * width;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < width; ++j) dot += y[j] * g[j];
                             double* dx = xn->grad.data() + r * width;
                             for (std::size_t j = 0; j < width; ++j) dx[j] += (g[j] - y[j] * dot) / norms[r];
                           }
                         });
}

// ---------------------------------------------------------------- temporal ops

/// Causal 1-D convolution over the time axis of x[B,T,C] with weight
/// w[K,C,O] and bias b[O]. Tap K-1 is the current step; the sequence is
/// left-padded by repeating its first step.
inline Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2) || b.size() != w.dim(2)) {
    throw ShapeError("causal_conv1d: input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), K = w.dim(0), O = w.dim(2);
  const auto rows = static_cast<Eigen::Index>(B * T);
  const auto kc = static_cast<Eigen::Index>(K * C);
  auto source_step = [K](std::size_t t, std::size_t k) {
    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(K - 1 - k);
    return static_cast<std::size_t>(std::max<std::ptrdiff_t>(s, 0));
  };
  RowMatrix columns(rows, kc);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k) {
        const double* src = x.values().data() + (bi * T + source_step(t, k)) * C;
        std::copy(src, src + C, columns.data() + (bi * T + t) * K * C + k * C);
      }
  std::vector<double> out(B * T * O);
  MatrixMap y(out.data(), rows, static_cast<Eigen::Index>(O));
  y.noalias() = columns * ConstMatrixMap(w.values().data(), kc, static_cast<Eigen::Index>(O));
  y.rowwise() += ConstVectorMap(b.values().data(), static_cast<Eigen::Index>(O)).transpose();
  return detail::make_op(
      {B, T, O}, std::move(out), {x, w, b},
      [xn = x.node(), wn = w.node(), bn = b.node(), columns = std::move(columns), B, T, C, K, O, rows, kc,
       source_step](Node& self) {
        ConstMatrixMap gy(self.grad.data(), rows, static_cast<Eigen::Index>(O));
        if (wn->requires_grad) {
          wn->ensure_grad();
          MatrixMap(wn->grad.data(), kc, static_cast<Eigen::Index>(O)).noalias() += columns.transpose() * gy;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          VectorMap(bn->grad.data(), static_cast<Eigen::Index>(O)) += gy.colwise().sum().transpose();
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          RowMatrix gcols = gy * ConstMatrixMap(wn->value.data(), kc, static_cast<Eigen::Index>(O)).transpose();
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t t = 0; t < T; ++t)
              for (std::size_t k = 0; k < K; ++k) {
                double* dst = xn->grad.data() + (bi * T + source_step(t, k)) * C;
                const double* g = gcols.data() + (bi * T + t) * K * C + k * C;
                for (std::size_t c = 0; c < C; ++c) dst[c] += g[c];
              }
        }
      });
}

/// Trailing-window average over time of x[B,T,C]: y_t = mean(x_{t-p+1..t}),
/// with the first step repeated for t < p-1.
inline Tensor causal_avg_pool(const Tensor& x, std::size_t window) {
  if (x.rank() != 3 || window == 0) throw ShapeError("causal_avg_pool: bad input or window");
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
  const double inv = 1.0 / static_cast<double>(window);
  auto src = [](std::size_t t, std::size_t k) { return t >= k ? t - k : 0; };
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < window; ++k) {
        const double* in = x.values().data() + (bi * T + src(t, k)) * C;
        double* o = out.data() + (bi * T + t) * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += in[c] * inv;
      }
  return detail::make_op(x.shape(), std::move(out), {x}, [xn = x.node(), B, T, C, window, inv, src](Node& self) {
    xn->ensure_grad();
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < window; ++k) {
          double* dst = xn->grad.data() + (bi * T + src(t, k)) * C;
          const double* g = self.grad.data() + (bi * T + t) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += g[c] * inv;
        }
  });
}

/// D_ij = ||a_i - b_j||^2 for a[na,p], b[nb,p].
inline Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("pairwise_sqdist: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t na = a.dim(0), nb = b.dim(0), p = a.dim(1);
  std::vector<double> out(na * nb);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double d = a.values()[i * p + k] - b.values()[j * p + k];
        s += d * d;
      }
      out[i * nb + j] = s;
    }
  return detail::make_op({na, nb}, std::move(out), {a, b}, [an = a.node(), bn = b.node(), na, nb, p](Node& self) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        const double g = 2.0 * self.grad[i * nb + j];
        if (g == 0.0) continue;
        for (std::size_t k = 0; k < p; ++k) {
          const double d = g * (an->value[i * p + k] - bn->value[j * p + k]);
          if (an->requires_grad) an->grad[i * p + k] += d;
          if (bn->requires_grad) bn->grad[j * p + k] -= d;
        }
      }
  });
}

/// Inverted dropout; identity when `rate` is zero.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double factor = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = keep(rng) ? factor : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

}  // namespace sedan
