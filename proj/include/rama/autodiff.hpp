#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// Every value is a 2-D matrix; batches live along rows. A Var is a cheap handle to a
// graph node. Operations executed while gradient recording is enabled (the default,
// see NoGradGuard) and with at least one input that requires a gradient record a
// backward closure. Var::backward() on a 1x1 result accumulates gradients into every
// leaf that requires one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rama/errors.hpp"

namespace rama::ad {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the enclosing scope (inference, targets, rollouts
/// whose gradient is never needed).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool retain_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <class Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

template <class T>
class Var {
 public:
  using Scalar = T;

  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  explicit Var(Matrix<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var constant(Matrix<T> value) { return Var(std::move(value), false); }
  static Var leaf(Matrix<T> value) { return Var(std::move(value), true); }
  static Var scalar(T v) { return Var(Matrix<T>::Constant(1, 1, v), false); }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }

  T item() const {
    if (rows() != 1 || cols() != 1) throw UsageError("item() on a non-scalar Var");
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void retain_grad() { node_->retain_grad = true; }

  bool has_grad() const { return node_->grad.size() != 0; }
  /// Accumulated gradient; zeros when nothing reached this node.
  Matrix<T> grad() const {
    if (has_grad()) return node_->grad;
    return Matrix<T>::Zero(rows(), cols());
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  void backward() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
void Var<T>::backward() const {
  if (rows() != 1 || cols() != 1) throw UsageError("backward() requires a 1x1 result");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order (inputs before outputs).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) {
      n->backward_fn(*n);
      if (!n->is_leaf && !n->retain_grad) n->grad.resize(0, 0);
    }
  }
}

namespace detail {

template <class T, class Fn>
Var<T> make_op(Matrix<T> value, std::vector<Var<T>> parents, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->is_leaf = false;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.shared());
      node->backward_fn = std::forward<Fn>(fn);
    }
  }
  return Var<T>(std::move(node));
}

template <class T>
Matrix<T> expand(const Matrix<T>& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

// Sums g down to the (rows, cols) shape it was broadcast from.
template <class T>
Matrix<T> reduce_to(const Matrix<T>& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix<T>::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

inline Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw UsageError(std::string("shape mismatch in ") + op);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise binary

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto r = detail::broadcast_dim(a.rows(), b.rows(), "add");
  const auto c = detail::broadcast_dim(a.cols(), b.cols(), "add");
  Matrix<T> v = detail::expand(a.value(), r, c) + detail::expand(b.value(), r, c);
  return detail::make_op<T>(std::move(v), {a, b}, [](Node<T>& s) {
    auto& pa = *s.parents[0];
    auto& pb = *s.parents[1];
    pa.accumulate(detail::reduce_to<T>(s.grad, pa.value.rows(), pa.value.cols()));
    pb.accumulate(detail::reduce_to<T>(s.grad, pb.value.rows(), pb.value.cols()));
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const auto r = detail::broadcast_dim(a.rows(), b.rows(), "sub");
  const auto c = detail::broadcast_dim(a.cols(), b.cols(), "sub");
  Matrix<T> v = detail::expand(a.value(), r, c) - detail::expand(b.value(), r, c);
  return detail::make_op<T>(std::move(v), {a, b}, [](Node<T>& s) {
    auto& pa = *s.parents[0];
    auto& pb = *s.parents[1];
    pa.accumulate(detail::reduce_to<T>(s.grad, pa.value.rows(), pa.value.cols()));
    pb.accumulate(detail::reduce_to<T>(Matrix<T>(-s.grad), pb.value.rows(), pb.value.cols()));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto r = detail::broadcast_dim(a.rows(), b.rows(), "mul");
  const auto c = detail::broadcast_dim(a.cols(), b.cols(), "mul");
  Matrix<T> v = detail::expand(a.value(), r, c).cwiseProduct(detail::expand(b.value(), r, c));
  return detail::make_op<T>(std::move(v), {a, b}, [](Node<T>& s) {
    auto& pa = *s.parents[0];
    auto& pb = *s.parents[1];
    const auto r = s.value.rows(), c = s.value.cols();
    if (pa.requires_grad) {
      Matrix<T> g = s.grad.cwiseProduct(detail::expand(pb.value, r, c));
      pa.accumulate(detail::reduce_to<T>(g, pa.value.rows(), pa.value.cols()));
    }
    if (pb.requires_grad) {
      Matrix<T> g = s.grad.cwiseProduct(detail::expand(pa.value, r, c));
      pb.accumulate(detail::reduce_to<T>(g, pb.value.rows(), pb.value.cols()));
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  const auto r = detail::broadcast_dim(a.rows(), b.rows(), "div");
  const auto c = detail::broadcast_dim(a.cols(), b.cols(), "div");
  Matrix<T> v = detail::expand(a.value(), r, c).cwiseQuotient(detail::expand(b.value(), r, c));
  return detail::make_op<T>(std::move(v), {a, b}, [](Node<T>& s) {
    auto& pa = *s.parents[0];
    auto& pb = *s.parents[1];
    const auto r = s.value.rows(), c = s.value.cols();
    const Matrix<T> bb = detail::expand(pb.value, r, c);
    if (pa.requires_grad) {
      Matrix<T> g = s.grad.cwiseQuotient(bb);
      pa.accumulate(detail::reduce_to<T>(g, pa.value.rows(), pa.value.cols()));
    }
    if (pb.requires_grad) {
      Matrix<T> g = -s.grad.cwiseProduct(s.value).cwiseQuotient(bb);
      pb.accumulate(detail::reduce_to<T>(g, pb.value.rows(), pb.value.cols()));
    }
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Matrix<T> v = a.value() * c;
  return detail::make_op<T>(std::move(v), {a}, [c](Node<T>& s) { s.parents[0]->accumulate(s.grad * c); });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Matrix<T> v = a.value().array() + c;
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) { s.parents[0]->accumulate(s.grad); });
}

template <class T>
Var<T> neg(const Var<T>& a) { return scale(a, T(-1)); }
template <class T>
Var<T> operator-(const Var<T>& a) { return neg(a); }

// ---------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dimensions differ");
  Matrix<T> v = a.value() * b.value();
  return detail::make_op<T>(std::move(v), {a, b}, [](Node<T>& s) {
    auto& pa = *s.parents[0];
    auto& pb = *s.parents[1];
    if (pa.requires_grad) pa.accumulate(s.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * s.grad);
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  Matrix<T> v = a.value().transpose();
  return detail::make_op<T>(std::move(v), {a},
                            [](Node<T>& s) { s.parents[0]->accumulate(s.grad.transpose()); });
}

// ---------------------------------------------------------------- unary

template <class T>
Var<T> tanh(const Var<T>& a) {
  Matrix<T> v = a.value().array().tanh();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    s.parents[0]->accumulate(s.grad.cwiseProduct((1 - s.value.array().square()).matrix()));
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Matrix<T> v = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    s.parents[0]->accumulate(s.grad.cwiseProduct((s.value.array() * (1 - s.value.array())).matrix()));
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Matrix<T> v = a.value().cwiseMax(T(0));
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    s.parents[0]->accumulate((x.array() > T(0)).select(s.grad.array(), T(0)).matrix());
  });
}

template <class T>
Var<T> elu(const Var<T>& a) {
  const auto& x = a.value();
  Matrix<T> v = (x.array() > T(0)).select(x.array(), x.array().exp() - T(1)).matrix();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    Matrix<T> d = (x.array() > T(0)).select(Matrix<T>::Ones(x.rows(), x.cols()).array(), s.value.array() + T(1));
    s.parents[0]->accumulate(s.grad.cwiseProduct(d));
  });
}

// log(1 + exp(x)), computed without overflow.
template <class T>
Var<T> softplus(const Var<T>& a) {
  const auto& x = a.value();
  Matrix<T> v = (x.array().cwiseMax(T(0)) + (-x.array().abs()).exp().log1p()).matrix();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    Matrix<T> sig = (T(1) / (T(1) + (-x.array()).exp())).matrix();
    s.parents[0]->accumulate(s.grad.cwiseProduct(sig));
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Matrix<T> v = a.value().array().exp();
  return detail::make_op<T>(std::move(v), {a},
                            [](Node<T>& s) { s.parents[0]->accumulate(s.grad.cwiseProduct(s.value)); });
}

template <class T>
Var<T> log(const Var<T>& a) {
  Matrix<T> v = a.value().array().log();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    s.parents[0]->accumulate(s.grad.cwiseQuotient(s.parents[0]->value));
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Matrix<T> v = a.value().array().square();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    s.parents[0]->accumulate(T(2) * s.grad.cwiseProduct(s.parents[0]->value));
  });
}

/// max(a, floor) elementwise; no gradient where the floor is active.
template <class T>
Var<T> clamp_min(const Var<T>& a, T floor) {
  Matrix<T> v = a.value().cwiseMax(floor);
  return detail::make_op<T>(std::move(v), {a}, [floor](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    s.parents[0]->accumulate((x.array() > floor).select(s.grad.array(), T(0)).matrix());
  });
}

/// Stop-gradient: same value, no graph edge.
template <class T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.value());
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> v = Matrix<T>::Constant(1, 1, a.value().sum());
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    s.parents[0]->accumulate(Matrix<T>::Constant(x.rows(), x.cols(), s.grad(0, 0)));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Per-row sum over columns: (r x c) -> (r x 1).
template <class T>
Var<T> row_sum(const Var<T>& a) {
  Matrix<T> v = a.value().rowwise().sum();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    s.parents[0]->accumulate(s.grad.replicate(1, x.cols()));
  });
}

/// Per-column sum over rows: (r x c) -> (1 x c).
template <class T>
Var<T> col_sum(const Var<T>& a) {
  Matrix<T> v = a.value().colwise().sum();
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    s.parents[0]->accumulate(s.grad.replicate(x.rows(), 1));
  });
}

// ---------------------------------------------------------------- shape

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols of nothing");
  const auto rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw UsageError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<T> v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_op<T>(std::move(v), parts, [](Node<T>& s) {
    Eigen::Index at = 0;
    for (auto& p : s.parents) {
      const auto c = p->value.cols();
      if (p->requires_grad) p->accumulate(s.grad.middleCols(at, c));
      at += c;
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_rows of nothing");
  const auto cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw UsageError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<T> v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_op<T>(std::move(v), parts, [](Node<T>& s) {
    Eigen::Index at = 0;
    for (auto& p : s.parents) {
      const auto r = p->value.rows();
      if (p->requires_grad) p->accumulate(s.grad.middleRows(at, r));
      at += r;
    }
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw UsageError("slice_cols out of range");
  Matrix<T> v = a.value().middleCols(start, count);
  return detail::make_op<T>(std::move(v), {a}, [start, count](Node<T>& s) {
    auto& p = *s.parents[0];
    Matrix<T> g = Matrix<T>::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = s.grad;
    p.accumulate(g);
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw UsageError("slice_rows out of range");
  Matrix<T> v = a.value().middleRows(start, count);
  return detail::make_op<T>(std::move(v), {a}, [start, count](Node<T>& s) {
    auto& p = *s.parents[0];
    Matrix<T> g = Matrix<T>::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = s.grad;
    p.accumulate(g);
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, std::vector<Eigen::Index> index) {
  Matrix<T> v(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw UsageError("gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return detail::make_op<T>(std::move(v), {a}, [index = std::move(index)](Node<T>& s) {
    auto& p = *s.parents[0];
    Matrix<T> g = Matrix<T>::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += s.grad.row(static_cast<Eigen::Index>(i));
    p.accumulate(g);
  });
}

// ---------------------------------------------------------------- softmax family

template <class T>
Matrix<T> softmax_rows_value(const Matrix<T>& x) {
  Matrix<T> v = x.colwise() - x.rowwise().maxCoeff();
  v = v.array().exp();
  v = v.array().colwise() / v.rowwise().sum().array();
  return v;
}

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  Matrix<T> v = softmax_rows_value<T>(a.value());
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    const auto& p = s.value;
    Matrix<T> dot = s.grad.cwiseProduct(p).rowwise().sum();
    Matrix<T> g = p.cwiseProduct((s.grad - dot.replicate(1, p.cols())));
    s.parents[0]->accumulate(g);
  });
}

template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
  const auto& x = a.value();
  Matrix<T> shifted = x.colwise() - x.rowwise().maxCoeff();
  Matrix<T> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix<T> v = shifted - lse.replicate(1, x.cols());
  return detail::make_op<T>(std::move(v), {a}, [](Node<T>& s) {
    Matrix<T> p = s.value.array().exp();
    Matrix<T> total = s.grad.rowwise().sum();
    s.parents[0]->accumulate(s.grad - p.cwiseProduct(total.replicate(1, p.cols())));
  });
}

/// Straight-through estimator. The forward value is exactly `one_hot`; the backward
/// pass routes the incoming gradient unchanged into `probs`, i.e. it behaves as
/// probs + stop_gradient(one_hot - probs) without the rounding of that sum.
template <class T>
Var<T> straight_through(const Var<T>& probs, const Matrix<T>& one_hot) {
  if (probs.rows() != one_hot.rows() || probs.cols() != one_hot.cols())
    throw UsageError("straight_through: shape mismatch");
  return detail::make_op<T>(Matrix<T>(one_hot), {probs},
                            [](Node<T>& s) { s.parents[0]->accumulate(s.grad); });
}

// ---------------------------------------------------------------- convolution

struct ConvShape {
  int in_channels = 1;
  int height = 16;
  int width = 16;
  int out_channels = 16;
  int kernel = 4;
  int stride = 2;
  int pad = 1;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in_channels * kernel * kernel; }
  int in_size() const { return in_channels * height * width; }
  int out_size() const { return out_channels * out_height() * out_width(); }
};

namespace detail {

// Column buffer for one CHW sample: (oh*ow) x (c*k*k).
template <class T, class Row>
void im2col(const Row& x, const ConvShape& cs, Matrix<T>& cols) {
  const int oh = cs.out_height(), ow = cs.out_width(), k = cs.kernel;
  cols.setZero(oh * ow, cs.patch());
  for (int c = 0; c < cs.in_channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int col = (c * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * cs.stride - cs.pad + ky;
          if (iy < 0 || iy >= cs.height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * cs.stride - cs.pad + kx;
            if (ix < 0 || ix >= cs.width) continue;
            cols(oy * ow + ox, col) = x((c * cs.height + iy) * cs.width + ix);
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution over a batch of flattened CHW images. `weight` is
/// out_channels x (in_channels*k*k), `bias` is 1 x out_channels.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvShape& cs) {
  if (x.cols() != cs.in_size()) throw UsageError("conv2d: input size does not match shape");
  const int positions = cs.out_height() * cs.out_width();
  Matrix<T> out(x.rows(), cs.out_size());
  Matrix<T> cols;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    detail::im2col<T>(x.value().row(i), cs, cols);
    Matrix<T> y = cols * weight.value().transpose();
    y.rowwise() += bias.value().row(0);
    for (int o = 0; o < cs.out_channels; ++o) out.row(i).segment(o * positions, positions) = y.col(o).transpose();
  }
  return detail::make_op<T>(std::move(out), {x, weight, bias}, [cs, positions](Node<T>& s) {
    auto& px = *s.parents[0];
    auto& pw = *s.parents[1];
    auto& pb = *s.parents[2];
    Matrix<T> cols, g(positions, cs.out_channels);
    Matrix<T> dw = Matrix<T>::Zero(pw.value.rows(), pw.value.cols());
    Matrix<T> db = Matrix<T>::Zero(1, cs.out_channels);
    Matrix<T> dx;
    if (px.requires_grad) dx = Matrix<T>::Zero(px.value.rows(), px.value.cols());
    const int oh = cs.out_height(), ow = cs.out_width(), k = cs.kernel;
    for (Eigen::Index i = 0; i < px.value.rows(); ++i) {
      for (int o = 0; o < cs.out_channels; ++o) g.col(o) = s.grad.row(i).segment(o * positions, positions).transpose();
      if (pw.requires_grad || pb.requires_grad) {
        detail::im2col<T>(px.value.row(i), cs, cols);
        dw += g.transpose() * cols;
        db += g.colwise().sum();
      }
      if (px.requires_grad) {
        Matrix<T> dcols = g * pw.value;
        for (int c = 0; c < cs.in_channels; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int col = (c * k + ky) * k + kx;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * cs.stride - cs.pad + ky;
                if (iy < 0 || iy >= cs.height) continue;
                for (int ox = 0; ox < ow; ++ox) {
                  const int ix = ox * cs.stride - cs.pad + kx;
                  if (ix < 0 || ix >= cs.width) continue;
                  dx(i, (c * cs.height + iy) * cs.width + ix) += dcols(oy * ow + ox, col);
                }
              }
            }
      }
    }
    if (pw.requires_grad) pw.accumulate(dw);
    if (pb.requires_grad) pb.accumulate(db);
    if (px.requires_grad) px.accumulate(dx);
  });
}

// ---------------------------------------------------------------- checks

template <class T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

template <class T>
void require_finite(const Var<T>& v, const std::string& what) {
  if (!v.value().allFinite()) throw NumericError("non-finite values in " + what);
}

}  // namespace rama::ad
