// Copyright 2026 The sa2sr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode differentiation over rank-2 double arrays.
//
// A Tape owns the recorded graph of one forward pass. Every op is a member of
// Tape; it computes its value eagerly and, when any operand requires a
// gradient, appends a backward rule. Tape::backward replays the rules in
// reverse exactly once.
//
// Axis convention follows numpy: axis 0 reduces over rows (result 1 x cols),
// axis 1 reduces over columns (result rows x 1), kAllAxes reduces everything
// to 1 x 1. Broadcasting is limited to a 1 x 1 operand in elementwise binary
// ops; bias rows are added with the explicit add_rowwise.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sa2sr/error.hpp"
#include "sa2sr/tensor.hpp"

namespace sa2sr::ad {

inline constexpr int kAllAxes = -1;

/// Finite stand-in for log(0). exp(kLogZero - x) underflows to exactly 0 for
/// any realistic x, while keeping every value on the tape finite.
inline constexpr double kLogZero = -1e30;

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;

  Tensor& grad_slot() {
    if (!has_grad) {
      grad = Tensor(value.rows(), value.cols());
      has_grad = true;
    }
    return grad;
  }
};

// A set of 1-D "lines" through a matrix along which a reduction runs.
struct Lines {
  std::size_t count;
  std::size_t length;
  std::size_t outer_stride;
  std::size_t inner_stride;

  std::size_t at(std::size_t line, std::size_t k) const { return line * outer_stride + k * inner_stride; }
};

inline Lines lines_for(const Tensor& t, int axis) {
  switch (axis) {
    case 1:
      return {t.rows(), t.cols(), t.cols(), 1};
    case 0:
      return {t.cols(), t.rows(), 1, t.cols()};
    case kAllAxes:
      return {1, t.size(), 0, 1};
    default:
      throw ShapeError("invalid axis " + std::to_string(axis));
  }
}

inline Tensor reduced_shape(const Tensor& t, int axis) {
  if (axis == 1) return Tensor(t.rows(), 1);
  if (axis == 0) return Tensor(1, t.cols());
  return Tensor(1, 1);
}

}  // namespace detail

/// Handle to a value recorded on a Tape (or a free-standing leaf).
class DiffArray {
 public:
  DiffArray() = default;

  const Tensor& value() const { return node_->value; }
  bool has_grad() const { return node_->has_grad; }
  /// Gradient of the last backward root with respect to this array. Zero-filled
  /// if backward never reached it.
  const Tensor& grad() const { return node_->grad_slot(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + value().shape_string());
    return node_->value[0];
  }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  friend class Tape;
  explicit DiffArray(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

enum class MaskedReduction { kSum, kMean, kVar };

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  std::size_t size() const { return rules_.size(); }
  bool consumed() const { return consumed_; }

  // ---- leaves -------------------------------------------------------------

  DiffArray leaf(Tensor value, bool requires_grad = true) {
    check_finite(value, "leaf");
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return DiffArray(std::move(node));
  }
  DiffArray constant(Tensor value) { return leaf(std::move(value), false); }
  DiffArray scalar(double v) { return constant(Tensor::scalar(v)); }

  // ---- linear algebra ------------------------------------------------------

  DiffArray matmul(const DiffArray& a, const DiffArray& b) {
    if (a.cols() != b.rows()) mismatch("matmul", a, b);
    Tensor out(a.rows(), b.cols());
    out.map().noalias() = a.value().map() * b.value().map();
    auto res = make(std::move(out), any_grad(a, b), "matmul");
    if (res.requires_grad()) {
      record([an = a.node_, bn = b.node_, on = res.node_] {
        if (!on->has_grad) return;
        if (an->requires_grad) an->grad_slot().map().noalias() += on->grad.map() * bn->value.map().transpose();
        if (bn->requires_grad) bn->grad_slot().map().noalias() += an->value.map().transpose() * on->grad.map();
      });
    }
    return res;
  }

  DiffArray transpose(const DiffArray& a) {
    Tensor out(a.cols(), a.rows());
    out.map() = a.value().map().transpose();
    auto res = make(std::move(out), a.requires_grad(), "transpose");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_] {
        if (!on->has_grad) return;
        an->grad_slot().map() += on->grad.map().transpose();
      });
    }
    return res;
  }

  /// a (r x c) plus the row vector `row` (1 x c) added to every row.
  DiffArray add_rowwise(const DiffArray& a, const DiffArray& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) mismatch("add_rowwise", a, row);
    Tensor out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += row.value()[c];
    auto res = make(std::move(out), any_grad(a, row), "add_rowwise");
    if (res.requires_grad()) {
      record([an = a.node_, bn = row.node_, on = res.node_] {
        if (!on->has_grad) return;
        if (an->requires_grad) an->grad_slot().map() += on->grad.map();
        if (bn->requires_grad) {
          Tensor& g = bn->grad_slot();
          for (std::size_t r = 0; r < on->grad.rows(); ++r)
            for (std::size_t c = 0; c < on->grad.cols(); ++c) g[c] += on->grad(r, c);
        }
      });
    }
    return res;
  }

  // ---- elementwise binary (same shape, or one side 1 x 1) -----------------

  DiffArray add(const DiffArray& a, const DiffArray& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
  }
  DiffArray sub(const DiffArray& a, const DiffArray& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
  }
  DiffArray mul(const DiffArray& a, const DiffArray& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
  }
  DiffArray div(const DiffArray& a, const DiffArray& b) {
    for (double v : b.value().values())
      if (v == 0.0) throw Error("domain violation: division by zero");
    return binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double x, double y, double) { return -x / (y * y); });
  }

  DiffArray scale(const DiffArray& a, double c) {
    return unary(
        a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
  }
  DiffArray add_scalar(const DiffArray& a, double c) {
    return unary(
        a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
  }
  DiffArray neg(const DiffArray& a) { return scale(a, -1.0); }

  // ---- elementwise unary ---------------------------------------------------

  DiffArray tanh(const DiffArray& a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
  }
  DiffArray sigmoid(const DiffArray& a) {
    return unary(
        a, "sigmoid",
        [](double x) {
          if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
          const double e = std::exp(x);
          return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
  }
  DiffArray leaky_relu(const DiffArray& a, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("leaky_relu alpha must lie in (0, 1)");
    return unary(
        a, "leaky_relu", [alpha](double x) { return x > 0 ? x : alpha * x; },
        [alpha](double x, double) { return x > 0 ? 1.0 : alpha; });
  }
  DiffArray exp(const DiffArray& a) {
    return unary(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
  }
  DiffArray log(const DiffArray& a) {
    for (double v : a.value().values())
      if (!(v > 0.0)) throw Error("domain violation: log of non-positive value");
    return unary(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
  }
  DiffArray sqrt(const DiffArray& a) {
    for (double v : a.value().values())
      if (!(v > 0.0)) throw Error("domain violation: sqrt of non-positive value");
    return unary(
        a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
  }
  DiffArray square(const DiffArray& a) {
    return unary(
        a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
  }

  // ---- normalizations along an axis ---------------------------------------

  DiffArray softmax(const DiffArray& a, int axis) {
    const detail::Lines ln = detail::lines_for(a.value(), axis);
    Tensor out(a.rows(), a.cols());
    const Tensor& x = a.value();
    for (std::size_t l = 0; l < ln.count; ++l) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < ln.length; ++k) m = std::max(m, x[ln.at(l, k)]);
      double s = 0;
      for (std::size_t k = 0; k < ln.length; ++k) s += (out[ln.at(l, k)] = std::exp(x[ln.at(l, k)] - m));
      for (std::size_t k = 0; k < ln.length; ++k) out[ln.at(l, k)] /= s;
    }
    auto res = make(std::move(out), a.requires_grad(), "softmax");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, ln] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        const Tensor& y = on->value;
        const Tensor& dy = on->grad;
        for (std::size_t l = 0; l < ln.count; ++l) {
          double dot = 0;
          for (std::size_t k = 0; k < ln.length; ++k) dot += dy[ln.at(l, k)] * y[ln.at(l, k)];
          for (std::size_t k = 0; k < ln.length; ++k) {
            const std::size_t i = ln.at(l, k);
            g[i] += y[i] * (dy[i] - dot);
          }
        }
      });
    }
    return res;
  }

  DiffArray log_softmax(const DiffArray& a, int axis) {
    const detail::Lines ln = detail::lines_for(a.value(), axis);
    Tensor out(a.rows(), a.cols());
    const Tensor& x = a.value();
    for (std::size_t l = 0; l < ln.count; ++l) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < ln.length; ++k) m = std::max(m, x[ln.at(l, k)]);
      double s = 0;
      for (std::size_t k = 0; k < ln.length; ++k) s += std::exp(x[ln.at(l, k)] - m);
      const double lse = m + std::log(s);
      for (std::size_t k = 0; k < ln.length; ++k) out[ln.at(l, k)] = x[ln.at(l, k)] - lse;
    }
    auto res = make(std::move(out), a.requires_grad(), "log_softmax");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, ln] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        const Tensor& y = on->value;
        const Tensor& dy = on->grad;
        for (std::size_t l = 0; l < ln.count; ++l) {
          double total = 0;
          for (std::size_t k = 0; k < ln.length; ++k) total += dy[ln.at(l, k)];
          for (std::size_t k = 0; k < ln.length; ++k) {
            const std::size_t i = ln.at(l, k);
            g[i] += dy[i] - std::exp(y[i]) * total;
          }
        }
      });
    }
    return res;
  }

  // ---- reductions ------------------------------------------------------------

  DiffArray reduce_sum(const DiffArray& a, int axis = kAllAxes) {
    return masked_reduce_impl(a, axis, {}, MaskedReduction::kSum, "reduce_sum");
  }
  DiffArray reduce_mean(const DiffArray& a, int axis = kAllAxes) {
    return masked_reduce_impl(a, axis, {}, MaskedReduction::kMean, "reduce_mean");
  }
  /// Population (divide-by-N) variance.
  DiffArray reduce_var(const DiffArray& a, int axis = kAllAxes) {
    return masked_reduce_impl(a, axis, {}, MaskedReduction::kVar, "reduce_var");
  }
  /// Reduction restricted to the positions where mask is nonzero. The mask runs
  /// along the reduced axis and must have at least one set entry.
  DiffArray masked_reduce(const DiffArray& a, int axis, std::span<const std::uint8_t> mask, MaskedReduction kind) {
    const detail::Lines ln = detail::lines_for(a.value(), axis);
    if (mask.size() != ln.length) {
      throw ShapeError("masked_reduce: mask length " + std::to_string(mask.size()) + " vs axis extent " +
                       std::to_string(ln.length));
    }
    if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
      throw Error("masked_reduce: mask selects no positions");
    return masked_reduce_impl(a, axis, std::vector<std::uint8_t>(mask.begin(), mask.end()), kind, "masked_reduce");
  }

  DiffArray reduce_logsumexp(const DiffArray& a, int axis = kAllAxes) {
    const detail::Lines ln = detail::lines_for(a.value(), axis);
    Tensor out = detail::reduced_shape(a.value(), axis);
    const Tensor& x = a.value();
    for (std::size_t l = 0; l < ln.count; ++l) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < ln.length; ++k) m = std::max(m, x[ln.at(l, k)]);
      double s = 0;
      for (std::size_t k = 0; k < ln.length; ++k) s += std::exp(x[ln.at(l, k)] - m);
      out[l] = m + std::log(s);
    }
    auto res = make(std::move(out), a.requires_grad(), "reduce_logsumexp");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, ln] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        for (std::size_t l = 0; l < ln.count; ++l)
          for (std::size_t k = 0; k < ln.length; ++k) {
            const std::size_t i = ln.at(l, k);
            g[i] += on->grad[l] * std::exp(an->value[i] - on->value[l]);
          }
      });
    }
    return res;
  }

  /// Elementwise log(sum_k exp(x_k)) over equally shaped operands.
  DiffArray logsumexp(const std::vector<DiffArray>& xs) {
    if (xs.empty()) throw ShapeError("logsumexp: no operands");
    bool grad = false;
    for (const auto& x : xs) {
      if (!x.value().same_shape(xs.front().value())) mismatch("logsumexp", xs.front(), x);
      grad = grad || x.requires_grad();
    }
    Tensor out(xs.front().rows(), xs.front().cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (const auto& x : xs) m = std::max(m, x.value()[i]);
      double s = 0;
      for (const auto& x : xs) s += std::exp(x.value()[i] - m);
      out[i] = m + std::log(s);
    }
    auto res = make(std::move(out), grad, "logsumexp");
    if (res.requires_grad()) {
      std::vector<std::shared_ptr<detail::Node>> ins;
      for (const auto& x : xs) ins.push_back(x.node_);
      record([ins = std::move(ins), on = res.node_] {
        if (!on->has_grad) return;
        for (const auto& in : ins) {
          if (!in->requires_grad) continue;
          Tensor& g = in->grad_slot();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * std::exp(in->value[i] - on->value[i]);
        }
      });
    }
    return res;
  }

  // ---- structural ------------------------------------------------------------

  DiffArray concat(const std::vector<DiffArray>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no operands");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    std::size_t rows = 0, cols = 0;
    bool grad = false;
    for (const auto& x : xs) {
      if (axis == 0) {
        if (x.cols() != xs.front().cols()) mismatch("concat", xs.front(), x);
        rows += x.rows();
        cols = x.cols();
      } else {
        if (x.rows() != xs.front().rows()) mismatch("concat", xs.front(), x);
        cols += x.cols();
        rows = x.rows();
      }
      grad = grad || x.requires_grad();
    }
    Tensor out(rows, cols);
    std::size_t offset = 0;
    for (const auto& x : xs) {
      const Tensor& v = x.value();
      for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) {
          if (axis == 0)
            out(offset + r, c) = v(r, c);
          else
            out(r, offset + c) = v(r, c);
        }
      offset += axis == 0 ? v.rows() : v.cols();
    }
    auto res = make(std::move(out), grad, "concat");
    if (res.requires_grad()) {
      std::vector<std::shared_ptr<detail::Node>> ins;
      for (const auto& x : xs) ins.push_back(x.node_);
      record([ins = std::move(ins), on = res.node_, axis] {
        if (!on->has_grad) return;
        std::size_t off = 0;
        for (const auto& in : ins) {
          const std::size_t r_n = in->value.rows(), c_n = in->value.cols();
          if (in->requires_grad) {
            Tensor& g = in->grad_slot();
            for (std::size_t r = 0; r < r_n; ++r)
              for (std::size_t c = 0; c < c_n; ++c) g(r, c) += axis == 0 ? on->grad(off + r, c) : on->grad(r, off + c);
          }
          off += axis == 0 ? r_n : c_n;
        }
      });
    }
    return res;
  }

  /// Half-open range [begin, end) along `axis`.
  DiffArray slice(const DiffArray& a, int axis, std::size_t begin, std::size_t end) {
    if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
    const std::size_t extent = axis == 0 ? a.rows() : a.cols();
    if (begin >= end || end > extent) {
      throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                       a.value().shape_string());
    }
    const std::size_t rows = axis == 0 ? end - begin : a.rows();
    const std::size_t cols = axis == 1 ? end - begin : a.cols();
    const std::size_t r0 = axis == 0 ? begin : 0, c0 = axis == 1 ? begin : 0;
    Tensor out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out(r, c) = a.value()(r0 + r, c0 + c);
    auto res = make(std::move(out), a.requires_grad(), "slice");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, r0, c0] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        for (std::size_t r = 0; r < on->grad.rows(); ++r)
          for (std::size_t c = 0; c < on->grad.cols(); ++c) g(r0 + r, c0 + c) += on->grad(r, c);
      });
    }
    return res;
  }

  /// out[i] = a.flat[indices[i]], shaped rows x cols. Repeated indices are allowed.
  DiffArray gather(const DiffArray& a, std::vector<std::size_t> indices, std::size_t rows, std::size_t cols) {
    if (indices.size() != rows * cols) throw ShapeError("gather: index count does not match output shape");
    Tensor out(rows, cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= a.value().size()) throw ShapeError("gather: index out of range");
      out[i] = a.value()[indices[i]];
    }
    auto res = make(std::move(out), a.requires_grad(), "gather");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, idx = std::move(indices)] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += on->grad[i];
      });
    }
    return res;
  }

  /// Sliding windows over rows: output row j concatenates input rows
  /// [j*stride, j*stride + window). Output has floor((L - window)/stride) + 1 rows.
  DiffArray unfold(const DiffArray& a, std::size_t window, std::size_t stride) {
    if (window == 0 || stride == 0) throw ShapeError("unfold: window and stride must be positive");
    if (a.rows() < window) {
      throw ShapeError("unfold: " + std::to_string(a.rows()) + " rows shorter than window " + std::to_string(window));
    }
    const std::size_t out_rows = (a.rows() - window) / stride + 1;
    const std::size_t c_in = a.cols();
    Tensor out(out_rows, window * c_in);
    for (std::size_t j = 0; j < out_rows; ++j)
      for (std::size_t w = 0; w < window; ++w)
        for (std::size_t c = 0; c < c_in; ++c) out(j, w * c_in + c) = a.value()(j * stride + w, c);
    auto res = make(std::move(out), a.requires_grad(), "unfold");
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, window, stride, c_in] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        for (std::size_t j = 0; j < on->grad.rows(); ++j)
          for (std::size_t w = 0; w < window; ++w)
            for (std::size_t c = 0; c < c_in; ++c) g(j * stride + w, c) += on->grad(j, w * c_in + c);
      });
    }
    return res;
  }

  // ---- backward --------------------------------------------------------------

  /// Propagates d(root)/d(x) into every reachable array that requires a
  /// gradient. Leaf gradients accumulate; the tape can be replayed only once.
  void backward(const DiffArray& root) {
    if (consumed_) throw Error("backward: tape already consumed");
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be scalar, got " + root.value().shape_string());
    consumed_ = true;
    if (!root.requires_grad()) return;
    root.node_->grad_slot()[0] += 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    rules_.clear();
  }

 private:
  static bool any_grad(const DiffArray& a, const DiffArray& b) { return a.requires_grad() || b.requires_grad(); }

  [[noreturn]] static void mismatch(const char* op, const DiffArray& a, const DiffArray& b) {
    throw ShapeError(std::string("shape mismatch in ") + op + ": " + a.value().shape_string() + " vs " +
                     b.value().shape_string());
  }

  static void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values())
      if (!std::isfinite(v)) throw Error(std::string("non-finite value produced by ") + op);
  }

  DiffArray make(Tensor value, bool requires_grad, const char* op) {
    check_finite(value, op);
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return DiffArray(std::move(node));
  }

  void record(std::function<void()> rule) {
    if (consumed_) throw Error("tape already consumed; start a new tape");
    rules_.push_back(std::move(rule));
  }

  template <class F, class DA, class DB>
  DiffArray binary(const DiffArray& a, const DiffArray& b, const char* name, F f, DA da, DB db) {
    const bool a_scalar = a.value().size() == 1 && !b.value().same_shape(a.value());
    const bool b_scalar = b.value().size() == 1 && !a.value().same_shape(b.value());
    if (!a.value().same_shape(b.value()) && !a_scalar && !b_scalar) mismatch(name, a, b);
    const Tensor& shape_src = a_scalar ? b.value() : a.value();
    Tensor out(shape_src.rows(), shape_src.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = f(a.value()[a_scalar ? 0 : i], b.value()[b_scalar ? 0 : i]);
    auto res = make(std::move(out), any_grad(a, b), name);
    if (res.requires_grad()) {
      record([an = a.node_, bn = b.node_, on = res.node_, a_scalar, b_scalar, da, db] {
        if (!on->has_grad) return;
        const Tensor& g = on->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = an->value[a_scalar ? 0 : i];
          const double y = bn->value[b_scalar ? 0 : i];
          if (an->requires_grad) an->grad_slot()[a_scalar ? 0 : i] += g[i] * da(x, y, on->value[i]);
          if (bn->requires_grad) bn->grad_slot()[b_scalar ? 0 : i] += g[i] * db(x, y, on->value[i]);
        }
      });
    }
    return res;
  }

  // df(x, y) receives input and output values.
  template <class F, class DF>
  DiffArray unary(const DiffArray& a, const char* name, F f, DF df) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
    auto res = make(std::move(out), a.requires_grad(), name);
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, df] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * df(an->value[i], on->value[i]);
      });
    }
    return res;
  }

  DiffArray masked_reduce_impl(const DiffArray& a, int axis, std::vector<std::uint8_t> mask, MaskedReduction kind,
                               const char* name) {
    const detail::Lines ln = detail::lines_for(a.value(), axis);
    if (ln.length == 0) throw ShapeError(std::string(name) + ": empty axis");
    auto on_mask = [&mask](std::size_t k) { return mask.empty() || mask[k] != 0; };
    std::size_t n = 0;
    for (std::size_t k = 0; k < ln.length; ++k) n += on_mask(k) ? 1 : 0;
    const Tensor& x = a.value();
    Tensor out = detail::reduced_shape(x, axis);
    std::vector<double> means(ln.count, 0.0);
    for (std::size_t l = 0; l < ln.count; ++l) {
      double s = 0;
      for (std::size_t k = 0; k < ln.length; ++k)
        if (on_mask(k)) s += x[ln.at(l, k)];
      means[l] = s / static_cast<double>(n);
      if (kind == MaskedReduction::kSum) {
        out[l] = s;
      } else if (kind == MaskedReduction::kMean) {
        out[l] = means[l];
      } else {
        double v = 0;
        for (std::size_t k = 0; k < ln.length; ++k)
          if (on_mask(k)) v += (x[ln.at(l, k)] - means[l]) * (x[ln.at(l, k)] - means[l]);
        out[l] = v / static_cast<double>(n);
      }
    }
    auto res = make(std::move(out), a.requires_grad(), name);
    if (res.requires_grad()) {
      record([an = a.node_, on = res.node_, ln, mask = std::move(mask), kind, n, means = std::move(means)] {
        if (!on->has_grad) return;
        Tensor& g = an->grad_slot();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t l = 0; l < ln.count; ++l) {
          const double gl = on->grad[l];
          for (std::size_t k = 0; k < ln.length; ++k) {
            if (!mask.empty() && mask[k] == 0) continue;
            const std::size_t i = ln.at(l, k);
            switch (kind) {
              case MaskedReduction::kSum:
                g[i] += gl;
                break;
              case MaskedReduction::kMean:
                g[i] += gl * inv_n;
                break;
              case MaskedReduction::kVar:
                g[i] += gl * 2.0 * (an->value[i] - means[l]) * inv_n;
                break;
            }
          }
        }
      });
    }
    return res;
  }

  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

}  // namespace sa2sr::ad
