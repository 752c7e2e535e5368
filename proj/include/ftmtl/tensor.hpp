#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ftmtl {

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<int>;

inline long numel(const Shape& shape) {
  long n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename S>
struct TensorNode {
  Shape shape;
  ArrayX<S> value;
  ArrayX<S> grad;  // empty until first written
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX<S>::Zero(value.size());
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording within a scope (inference / numeric probes).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major n-d array with an optional gradient buffer. Copies are
/// shallow (shared storage); value() exposes the flat Eigen array.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : node_(std::make_shared<detail::TensorNode<S>>()) {}

  explicit Tensor(Shape shape) : Tensor() {
    validate_shape(shape);
    node_->shape = std::move(shape);
    node_->value = ArrayX<S>::Zero(numel(node_->shape));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    t.value().setConstant(v);
    return t;
  }

  static Tensor from(Shape shape, const std::vector<S>& vals) {
    Tensor t(std::move(shape));
    if (static_cast<long>(vals.size()) != t.size())
      throw std::invalid_argument("Tensor::from: data length " + std::to_string(vals.size()) +
                                  " does not match shape " + shape_str(t.shape()));
    std::copy(vals.begin(), vals.end(), t.value().data());
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  long size() const { return node_->value.size(); }

  ArrayX<S>& value() { return node_->value; }
  const ArrayX<S>& value() const { return node_->value; }
  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  ArrayX<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }

  S item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  S at(std::initializer_list<int> idx) const { return node_->value[offset_of(idx)]; }

  long offset_of(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw std::invalid_argument("Tensor::at: index rank mismatch");
    long off = 0;
    int i = 0;
    for (int v : idx) {
      if (v < 0 || v >= node_->shape[static_cast<std::size_t>(i)])
        throw std::out_of_range("Tensor::at: index out of range");
      off = off * node_->shape[static_cast<std::size_t>(i)] + v;
      ++i;
    }
    return off;
  }

  Tensor clone() const {
    Tensor t(shape());
    t.value() = value();
    return t;
  }

  bool all_finite() const { return node_->value.isFinite().all(); }

  std::shared_ptr<detail::TensorNode<S>> node() const { return node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent in shape " + shape_str(shape));
  }

  std::shared_ptr<detail::TensorNode<S>> node_;
};

/// Ordered record of executed operations; replaying it in reverse accumulates
/// each tensor's gradient exactly once per use.
template <typename S>
class Tape {
 public:
  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

  std::size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(Tensor<S> loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw std::runtime_error("backward: loss is not finite");
    loss.grad()[0] = S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> entries_;
};

template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>::active().backward(loss);
}

namespace detail {

template <typename S>
bool track(std::initializer_list<const Tensor<S>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Skip a backward step when the output gradient was never written.
template <typename S>
bool no_out_grad(const std::shared_ptr<TensorNode<S>>& out) {
  return out->grad.size() != out->value.size();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / reshaping ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> y(a.shape());
  y.value() = a.value() + b.value();
  if (detail::track<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([an, bn, yn] {
      if (detail::no_out_grad(yn)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad += yn->grad;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad += yn->grad;
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> y(a.shape());
  y.value() = a.value() - b.value();
  if (detail::track<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([an, bn, yn] {
      if (detail::no_out_grad(yn)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad += yn->grad;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad -= yn->grad;
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Tensor<S> y(x.shape());
  y.value() = x.value() * c;
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn, c] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      xn->grad += yn->grad * c;
    });
  }
  return y;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> y({1});
  y.value()[0] = x.value().sum();
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      xn->grad += yn->grad[0];
    });
  }
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

template <typename S>
Tensor<S> pick(const Tensor<S>& x, long index) {
  if (index < 0 || index >= x.size()) throw std::out_of_range("pick: index out of range");
  Tensor<S> y({1});
  y.value()[0] = x.value()[index];
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn, index] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      xn->grad[index] += yn->grad[0];
    });
  }
  return y;
}

template <typename S>
Tensor<S> gather(const Tensor<S>& x, const std::vector<long>& indices) {
  Tensor<S> y({static_cast<int>(indices.size())});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= x.size()) throw std::out_of_range("gather: index out of range");
    y.value()[static_cast<long>(i)] = x.value()[indices[i]];
  }
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn, indices] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) xn->grad[indices[i]] += yn->grad[static_cast<long>(i)];
    });
  }
  return y;
}

/// Identity on values; blocks gradient flow.
template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  y.value() = x.value();
  return y;
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  if (a.rank() != b.rank()) throw std::invalid_argument("concat: rank mismatch");
  if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("concat: bad axis");
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw std::invalid_argument("concat: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);
  Tensor<S> y(out_shape);

  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const long a_block = a.dim(axis) * inner, b_block = b.dim(axis) * inner;
  for (long o = 0; o < outer; ++o) {
    std::copy_n(a.data() + o * a_block, a_block, y.data() + o * (a_block + b_block));
    std::copy_n(b.data() + o * b_block, b_block, y.data() + o * (a_block + b_block) + a_block);
  }
  if (detail::track<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([an, bn, yn, outer, a_block, b_block] {
      if (detail::no_out_grad(yn)) return;
      for (long o = 0; o < outer; ++o) {
        const S* g = yn->grad.data() + o * (a_block + b_block);
        if (an->requires_grad) {
          an->ensure_grad();
          Eigen::Map<ArrayX<S>>(an->grad.data() + o * a_block, a_block) +=
              Eigen::Map<const ArrayX<S>>(g, a_block);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          Eigen::Map<ArrayX<S>>(bn->grad.data() + o * b_block, b_block) +=
              Eigen::Map<const ArrayX<S>>(g + a_block, b_block);
        }
      }
    });
  }
  return y;
}

/// Elementwise product. Either equal shapes, or b matching a's trailing dims
/// so one map multiplies every channel (Eq.-style channel broadcast).
template <typename S>
Tensor<S> elem_mul(const Tensor<S>& a, const Tensor<S>& b) {
  const bool same = a.shape() == b.shape();
  const bool chan_bcast =
      !same && a.rank() == b.rank() + 1 &&
      std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin());
  if (!same && !chan_bcast)
    throw std::invalid_argument("elem_mul: shapes not broadcastable " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor<S> y(a.shape());
  const long plane = b.size();
  const long channels = same ? 1 : a.dim(0);
  if (same) {
    y.value() = a.value() * b.value();
  } else {
    for (long c = 0; c < channels; ++c)
      Eigen::Map<ArrayX<S>>(y.data() + c * plane, plane) =
          Eigen::Map<const ArrayX<S>>(a.data() + c * plane, plane) * b.value();
  }
  if (detail::track<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([an, bn, yn, same, plane, channels] {
      if (detail::no_out_grad(yn)) return;
      if (same) {
        if (an->requires_grad) {
          an->ensure_grad();
          an->grad += yn->grad * bn->value;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad += yn->grad * an->value;
        }
      } else {
        for (long c = 0; c < channels; ++c) {
          Eigen::Map<const ArrayX<S>> g(yn->grad.data() + c * plane, plane);
          if (an->requires_grad) {
            an->ensure_grad();
            Eigen::Map<ArrayX<S>>(an->grad.data() + c * plane, plane) += g * bn->value;
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad += g * Eigen::Map<const ArrayX<S>>(an->value.data() + c * plane, plane);
          }
        }
      }
    });
  }
  return y;
}

/// Elementwise max; gradient routes to the larger operand, a on ties.
template <typename S>
Tensor<S> elem_max(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("elem_max: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> y(a.shape());
  y.value() = a.value().max(b.value());
  if (detail::track<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([an, bn, yn] {
      if (detail::no_out_grad(yn)) return;
      ArrayX<S> take_a = (an->value >= bn->value).template cast<S>();
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad += yn->grad * take_a;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad += yn->grad * (S(1) - take_a);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  y.value() = x.value().max(S(0));
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      xn->grad += yn->grad * (xn->value > S(0)).template cast<S>();
    });
  }
  return y;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  // split by sign for stability
  y.value() = (x.value() >= S(0))
                  .select(S(1) / (S(1) + (-x.value()).exp()),
                          x.value().exp() / (S(1) + x.value().exp()));
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      xn->grad += yn->grad * yn->value * (S(1) - yn->value);
    });
  }
  return y;
}

/// Stabilized softmax over a rank-1 tensor.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  if (x.rank() != 1) throw std::invalid_argument("softmax: expects a rank-1 tensor");
  Tensor<S> y(x.shape());
  ArrayX<S> shifted = x.value() - x.value().maxCoeff();
  ArrayX<S> e = shifted.exp();
  y.value() = e / e.sum();
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      const S dot = (yn->grad * yn->value).sum();
      xn->grad += yn->value * (yn->grad - dot);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// y = W x + b with x:[n], W:[m,n], b:[m].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1)
    throw std::invalid_argument("linear: expects x:[n], w:[m,n], b:[m]");
  const int n = x.dim(0), m = w.dim(0);
  if (w.dim(1) != n || b.dim(0) != m)
    throw std::invalid_argument("linear: dimension mismatch x" + shape_str(x.shape()) + " w" +
                                shape_str(w.shape()) + " b" + shape_str(b.shape()));
  Tensor<S> y({m});
  Eigen::Map<const RowMatrixX<S>> W(w.data(), m, n);
  Eigen::Map<const VectorX<S>> xv(x.data(), n);
  Eigen::Map<VectorX<S>>(y.data(), m) = W * xv + Eigen::Map<const VectorX<S>>(b.data(), m);
  if (detail::track<S>({&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([xn, wn, bn, yn, m, n] {
      if (detail::no_out_grad(yn)) return;
      Eigen::Map<const VectorX<S>> g(yn->grad.data(), m);
      Eigen::Map<const RowMatrixX<S>> W(wn->value.data(), m, n);
      if (xn->requires_grad) {
        xn->ensure_grad();
        Eigen::Map<VectorX<S>>(xn->grad.data(), n) += W.transpose() * g;
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        Eigen::Map<RowMatrixX<S>>(wn->grad.data(), m, n) +=
            g * Eigen::Map<const VectorX<S>>(xn->value.data(), n).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Eigen::Map<VectorX<S>>(bn->grad.data(), m) += g;
      }
    });
  }
  return y;
}

/// Row-wise dot products: rows:[n,c] * w:[c] + b:[1] -> [n].
template <typename S>
Tensor<S> linear_rows(const Tensor<S>& rows, const Tensor<S>& w, const Tensor<S>& b) {
  if (rows.rank() != 2 || w.rank() != 1 || b.size() != 1)
    throw std::invalid_argument("linear_rows: expects rows:[n,c], w:[c], b:[1]");
  const int n = rows.dim(0), c = rows.dim(1);
  if (w.dim(0) != c) throw std::invalid_argument("linear_rows: feature width mismatch");
  Tensor<S> y({n});
  Eigen::Map<const RowMatrixX<S>> F(rows.data(), n, c);
  Eigen::Map<VectorX<S>>(y.data(), n) =
      (F * Eigen::Map<const VectorX<S>>(w.data(), c)).array() + b.value()[0];
  if (detail::track<S>({&rows, &w, &b})) {
    y.set_requires_grad(true);
    auto rn = rows.node(), wn = w.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([rn, wn, bn, yn, n, c] {
      if (detail::no_out_grad(yn)) return;
      Eigen::Map<const VectorX<S>> g(yn->grad.data(), n);
      if (rn->requires_grad) {
        rn->ensure_grad();
        Eigen::Map<RowMatrixX<S>>(rn->grad.data(), n, c) +=
            g * Eigen::Map<const VectorX<S>>(wn->value.data(), c).transpose();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        Eigen::Map<VectorX<S>>(wn->grad.data(), c) +=
            Eigen::Map<const RowMatrixX<S>>(rn->value.data(), n, c).transpose() * g;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[0] += g.sum();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolutions and pooling
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
MatrixX<S> im2col(const ArrayX<S>& x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo) {
  MatrixX<S> cols(static_cast<long>(cin) * k * k, static_cast<long>(ho) * wo);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const long col = static_cast<long>(oy) * wo + ox;
      long row = 0;
      for (int ci = 0; ci < cin; ++ci) {
        const S* plane = x.data() + static_cast<long>(ci) * h * w;
        for (int a = 0; a < k; ++a) {
          const int iy = oy * stride + a - pad;
          for (int b = 0; b < k; ++b, ++row) {
            const int ix = ox * stride + b - pad;
            cols(row, col) =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[static_cast<long>(iy) * w + ix] : S(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im_accum(const MatrixX<S>& cols, ArrayX<S>& gx, int cin, int h, int w, int k, int stride, int pad,
                  int ho, int wo) {
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const long col = static_cast<long>(oy) * wo + ox;
      long row = 0;
      for (int ci = 0; ci < cin; ++ci) {
        S* plane = gx.data() + static_cast<long>(ci) * h * w;
        for (int a = 0; a < k; ++a) {
          const int iy = oy * stride + a - pad;
          for (int b = 0; b < k; ++b, ++row) {
            const int ix = ox * stride + b - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) plane[static_cast<long>(iy) * w + ix] += cols(row, col);
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-d correlation: x:[cin,h,w], w:[cout,cin,k,k], b:[cout] -> [cout,h',w'].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 1, int pad = 0) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw std::invalid_argument("conv2d: expects x:[c,h,w], w:[co,ci,k,k], b:[co]");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw std::invalid_argument("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                                std::to_string(cin));
  if (w.dim(3) != k) throw std::invalid_argument("conv2d: kernel must be square");
  if (b.dim(0) != cout) throw std::invalid_argument("conv2d: bias length mismatch");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (k > h + 2 * pad || k > wd + 2 * pad)
    throw std::invalid_argument("conv2d: kernel exceeds padded input");

  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<S> y({cout, ho, wo});
  const long npix = static_cast<long>(ho) * wo;
  const long kk = static_cast<long>(cin) * k * k;

  MatrixX<S> cols = detail::im2col(x.value(), cin, h, wd, k, stride, pad, ho, wo);
  Eigen::Map<const RowMatrixX<S>> W(w.data(), cout, kk);
  Eigen::Map<RowMatrixX<S>> out(y.data(), cout, npix);
  out.noalias() = W * cols;
  out.colwise() += Eigen::Map<const VectorX<S>>(b.data(), cout);

  if (detail::track<S>({&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    auto cols_keep = std::make_shared<MatrixX<S>>(std::move(cols));
    Tape<S>::active().record([xn, wn, bn, yn, cols_keep, cin, h, wd, cout, k, stride, pad, ho, wo, npix, kk] {
      if (detail::no_out_grad(yn)) return;
      Eigen::Map<const RowMatrixX<S>> dOut(yn->grad.data(), cout, npix);
      if (bn->requires_grad) {
        bn->ensure_grad();
        Eigen::Map<VectorX<S>>(bn->grad.data(), cout) += dOut.rowwise().sum();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        Eigen::Map<RowMatrixX<S>>(wn->grad.data(), cout, kk).noalias() += dOut * cols_keep->transpose();
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        MatrixX<S> dCols(kk, npix);
        dCols.noalias() = Eigen::Map<const RowMatrixX<S>>(wn->value.data(), cout, kk).transpose() * dOut;
        detail::col2im_accum(dCols, xn->grad, cin, h, wd, k, stride, pad, ho, wo);
      }
    });
  }
  return y;
}

/// Stride-2 transposed convolution with even kernel, exact 2x upsampling:
/// x:[cin,h,w], w:[cout,cin,k,k] -> [cout,2h,2w].
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 2) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw std::invalid_argument("conv_transpose2d: expects x:[c,h,w], w:[co,ci,k,k], b:[co]");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw std::invalid_argument("conv_transpose2d: weight expects " + std::to_string(w.dim(1)) +
                                " input channels, got " + std::to_string(cin));
  if (b.dim(0) != cout) throw std::invalid_argument("conv_transpose2d: bias length mismatch");
  if (stride != 2 || k % 2 != 0 || w.dim(3) != k)
    throw std::invalid_argument("conv_transpose2d: configuration must double the resolution exactly "
                                "(stride 2, square even kernel)");
  const int pad = (k - 2) / 2;
  const int ho = 2 * h, wo = 2 * wd;
  Tensor<S> y({cout, ho, wo});

  const long kkrows = static_cast<long>(cout) * k * k;
  const long in_pix = static_cast<long>(h) * wd;
  // permute [co,ci,a,b] -> rows (co,a,b) x cols ci
  MatrixX<S> G(kkrows, cin);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int a = 0; a < k; ++a)
        for (int bb = 0; bb < k; ++bb)
          G((static_cast<long>(co) * k + a) * k + bb, ci) =
              w.value()[((static_cast<long>(co) * cin + ci) * k + a) * k + bb];

  MatrixX<S> scat(kkrows, in_pix);
  scat.noalias() = G * Eigen::Map<const RowMatrixX<S>>(x.data(), cin, in_pix);

  for (int co = 0; co < cout; ++co) {
    S* plane = y.data() + static_cast<long>(co) * ho * wo;
    Eigen::Map<ArrayX<S>>(plane, static_cast<long>(ho) * wo).setConstant(b.value()[co]);
    for (int a = 0; a < k; ++a)
      for (int bb = 0; bb < k; ++bb) {
        const long row = (static_cast<long>(co) * k + a) * k + bb;
        for (int i = 0; i < h; ++i) {
          const int oy = 2 * i + a - pad;
          if (oy < 0 || oy >= ho) continue;
          for (int j = 0; j < wd; ++j) {
            const int ox = 2 * j + bb - pad;
            if (ox < 0 || ox >= wo) continue;
            plane[static_cast<long>(oy) * wo + ox] += scat(row, static_cast<long>(i) * wd + j);
          }
        }
      }
  }

  if (detail::track<S>({&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    Tape<S>::active().record([xn, wn, bn, yn, cin, h, wd, cout, k, pad, ho, wo, kkrows, in_pix] {
      if (detail::no_out_grad(yn)) return;
      // gather output grads back into scatter layout
      MatrixX<S> dScat = MatrixX<S>::Zero(kkrows, in_pix);
      for (int co = 0; co < cout; ++co) {
        const S* gplane = yn->grad.data() + static_cast<long>(co) * ho * wo;
        for (int a = 0; a < k; ++a)
          for (int bb = 0; bb < k; ++bb) {
            const long row = (static_cast<long>(co) * k + a) * k + bb;
            for (int i = 0; i < h; ++i) {
              const int oy = 2 * i + a - pad;
              if (oy < 0 || oy >= ho) continue;
              for (int j = 0; j < wd; ++j) {
                const int ox = 2 * j + bb - pad;
                if (ox < 0 || ox >= wo) continue;
                dScat(row, static_cast<long>(i) * wd + j) = gplane[static_cast<long>(oy) * wo + ox];
              }
            }
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int co = 0; co < cout; ++co)
          bn->grad[co] +=
              Eigen::Map<const ArrayX<S>>(yn->grad.data() + static_cast<long>(co) * ho * wo,
                                          static_cast<long>(ho) * wo)
                  .sum();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        MatrixX<S> dG(kkrows, cin);
        dG.noalias() = dScat * Eigen::Map<const RowMatrixX<S>>(xn->value.data(), cin, in_pix).transpose();
        for (int co = 0; co < cout; ++co)
          for (int ci = 0; ci < cin; ++ci)
            for (int a = 0; a < k; ++a)
              for (int bb = 0; bb < k; ++bb)
                wn->grad[((static_cast<long>(co) * cin + ci) * k + a) * k + bb] +=
                    dG((static_cast<long>(co) * k + a) * k + bb, ci);
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        MatrixX<S> G(kkrows, cin);
        for (int co = 0; co < cout; ++co)
          for (int ci = 0; ci < cin; ++ci)
            for (int a = 0; a < k; ++a)
              for (int bb = 0; bb < k; ++bb)
                G((static_cast<long>(co) * k + a) * k + bb, ci) =
                    wn->value[((static_cast<long>(co) * cin + ci) * k + a) * k + bb];
        Eigen::Map<RowMatrixX<S>>(xn->grad.data(), cin, in_pix).noalias() += G.transpose() * dScat;
      }
    });
  }
  return y;
}

/// Max pooling; gradient routes to the first-occurrence argmax per window.
template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x, int window, int stride) {
  if (x.rank() != 3) throw std::invalid_argument("max_pool2d: expects x:[c,h,w]");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  if (window < 1 || window > h || window > wd)
    throw std::invalid_argument("max_pool2d: window exceeds spatial extents");
  if (stride < 1) throw std::invalid_argument("max_pool2d: stride must be >= 1");
  const int ho = (h - window) / stride + 1;
  const int wo = (wd - window) / stride + 1;
  Tensor<S> y({c, ho, wo});
  auto argmax = std::make_shared<std::vector<long>>(static_cast<std::size_t>(c) * ho * wo);
  long out_i = 0;
  for (int ch = 0; ch < c; ++ch) {
    const S* plane = x.data() + static_cast<long>(ch) * h * wd;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox, ++out_i) {
        S best = plane[static_cast<long>(oy * stride) * wd + ox * stride];
        long best_off = static_cast<long>(ch) * h * wd + static_cast<long>(oy * stride) * wd + ox * stride;
        for (int a = 0; a < window; ++a)
          for (int bb = 0; bb < window; ++bb) {
            const long off = static_cast<long>(ch) * h * wd + static_cast<long>(oy * stride + a) * wd +
                             (ox * stride + bb);
            const S v = x.value()[off];
            if (v > best) {
              best = v;
              best_off = off;
            }
          }
        y.value()[out_i] = best;
        (*argmax)[static_cast<std::size_t>(out_i)] = best_off;
      }
  }
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn, argmax] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      for (long i = 0; i < yn->grad.size(); ++i) xn->grad[(*argmax)[static_cast<std::size_t>(i)]] += yn->grad[i];
    });
  }
  return y;
}

/// Per-channel spatial mean: [c,h,w] -> [c].
template <typename S>
Tensor<S> global_mean_pool(const Tensor<S>& x) {
  if (x.rank() != 3) throw std::invalid_argument("global_mean_pool: expects x:[c,h,w]");
  const int c = x.dim(0);
  const long plane = static_cast<long>(x.dim(1)) * x.dim(2);
  Tensor<S> y({c});
  for (int ch = 0; ch < c; ++ch)
    y.value()[ch] = Eigen::Map<const ArrayX<S>>(x.data() + ch * plane, plane).mean();
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn, c, plane] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        Eigen::Map<ArrayX<S>>(xn->grad.data() + ch * plane, plane) += yn->grad[ch] / static_cast<S>(plane);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

/// sum_i smooth_l1(x_i); derivative is clamp(x, -1, 1).
template <typename S>
Tensor<S> smooth_l1_sum(const Tensor<S>& x) {
  Tensor<S> y({1});
  S acc = 0;
  for (long i = 0; i < x.size(); ++i) {
    const S v = x.value()[i];
    const S a = std::abs(v);
    acc += a < S(1) ? S(0.5) * v * v : a - S(0.5);
  }
  y.value()[0] = acc;
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active().record([xn, yn] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      xn->grad += yn->grad[0] * xn->value.min(S(1)).max(S(-1));
    });
  }
  return y;
}

inline constexpr double kProbEps = 1e-7;

/// Mean binary cross entropy against a constant target; probabilities are
/// clamped into [eps, 1-eps] before the logs.
template <typename S>
Tensor<S> bce_mean(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("bce_mean: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  const S eps = static_cast<S>(kProbEps);
  Tensor<S> y({1});
  ArrayX<S> p = pred.value().min(S(1) - eps).max(eps);
  y.value()[0] = (-(target.value() * p.log()) - (S(1) - target.value()) * (S(1) - p).log()).mean();
  if (detail::track<S>({&pred})) {
    y.set_requires_grad(true);
    auto pn = pred.node(), tn = target.node(), yn = y.node();
    Tape<S>::active().record([pn, tn, yn, eps] {
      if (detail::no_out_grad(yn)) return;
      pn->ensure_grad();
      const S g = yn->grad[0] / static_cast<S>(pn->value.size());
      ArrayX<S> inside = (pn->value > eps && pn->value < S(1) - eps).template cast<S>();
      ArrayX<S> p = pn->value.min(S(1) - eps).max(eps);
      pn->grad += g * inside * (p - tn->value) / (p * (S(1) - p));
    });
  }
  return y;
}

/// -log(max(p[u], eps)) for a probability vector p.
template <typename S>
Tensor<S> nll_pick(const Tensor<S>& probs, long u) {
  if (u < 0 || u >= probs.size()) throw std::out_of_range("nll_pick: class index out of range");
  const S eps = static_cast<S>(kProbEps);
  Tensor<S> y({1});
  y.value()[0] = -std::log(std::max(probs.value()[u], eps));
  if (detail::track<S>({&probs})) {
    y.set_requires_grad(true);
    auto pn = probs.node(), yn = y.node();
    Tape<S>::active().record([pn, yn, u, eps] {
      if (detail::no_out_grad(yn)) return;
      pn->ensure_grad();
      if (pn->value[u] > eps) pn->grad[u] -= yn->grad[0] / pn->value[u];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Region features (objectness input)
// ---------------------------------------------------------------------------

struct CellRect {
  int y0, y1, x0, x1;  // half-open cell ranges
};

/// Per-channel means over cell rectangles of a [c,h,w] map -> [n,c].
template <typename S>
Tensor<S> region_means(const Tensor<S>& x, const std::vector<CellRect>& regions) {
  if (x.rank() != 3) throw std::invalid_argument("region_means: expects x:[c,h,w]");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int n = static_cast<int>(regions.size());
  if (n == 0) throw std::invalid_argument("region_means: no regions");
  for (const auto& r : regions)
    if (r.y0 < 0 || r.x0 < 0 || r.y1 > h || r.x1 > wd || r.y0 >= r.y1 || r.x0 >= r.x1)
      throw std::invalid_argument("region_means: region outside feature map");
  Tensor<S> y({n, c});
  for (int i = 0; i < n; ++i) {
    const auto& r = regions[static_cast<std::size_t>(i)];
    const S inv = S(1) / static_cast<S>((r.y1 - r.y0) * (r.x1 - r.x0));
    for (int ch = 0; ch < c; ++ch) {
      S acc = 0;
      const S* plane = x.data() + static_cast<long>(ch) * h * wd;
      for (int yy = r.y0; yy < r.y1; ++yy)
        for (int xx = r.x0; xx < r.x1; ++xx) acc += plane[static_cast<long>(yy) * wd + xx];
      y.value()[static_cast<long>(i) * c + ch] = acc * inv;
    }
  }
  if (detail::track<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    auto regs = std::make_shared<std::vector<CellRect>>(regions);
    Tape<S>::active().record([xn, yn, regs, c, h, wd, n] {
      if (detail::no_out_grad(yn)) return;
      xn->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const auto& r = (*regs)[static_cast<std::size_t>(i)];
        const S inv = S(1) / static_cast<S>((r.y1 - r.y0) * (r.x1 - r.x0));
        for (int ch = 0; ch < c; ++ch) {
          const S g = yn->grad[static_cast<long>(i) * c + ch] * inv;
          S* plane = xn->grad.data() + static_cast<long>(ch) * h * wd;
          for (int yy = r.y0; yy < r.y1; ++yy)
            for (int xx = r.x0; xx < r.x1; ++xx) plane[static_cast<long>(yy) * wd + xx] += g;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Max over components of |analytic - numeric| / max(1, |numeric|) where the
/// numeric gradient is a central finite difference with step eps.
template <typename S>
S grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, Tensor<S> x, S eps) {
  auto& tape = Tape<S>::active();
  tape.clear();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<S> y = f(x);
  if (y.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  tape.backward(y);
  ArrayX<S> analytic = x.has_grad() ? ArrayX<S>(x.grad()) : ArrayX<S>::Zero(x.size());
  tape.clear();

  S worst = 0;
  {
    NoGradGuard ng;
    for (long i = 0; i < x.size(); ++i) {
      const S keep = x.value()[i];
      x.value()[i] = keep + eps;
      const S fp = f(x).item();
      x.value()[i] = keep - eps;
      const S fm = f(x).item();
      x.value()[i] = keep;
      const S numeric = (fp - fm) / (2 * eps);
      const S rel = std::abs(analytic[i] - numeric) / std::max(S(1), std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace ftmtl
