#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "snm/tensor.hpp"

namespace snm {

/// A named learnable tensor together with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives and
/// has not been cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  double item() const { return value().item(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpKind : std::uint8_t {
  kConstant,
  kParam,
  kGather,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kTanh,
  kSigmoid,
  kRelu,
  kLog,
  kLogSigmoid,
  kClamp,
  kAffine,
  kSum,
  kDot,
  kMaskedSoftmax,
  kMaskedMean,
  kReshape,
  kCustom,
};

inline std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParam: return "param";
    case OpKind::kGather: return "gather";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kConcat: return "concat";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kLog: return "log";
    case OpKind::kLogSigmoid: return "log_sigmoid";
    case OpKind::kClamp: return "clamp";
    case OpKind::kAffine: return "affine";
    case OpKind::kSum: return "sum";
    case OpKind::kDot: return "dot";
    case OpKind::kMaskedSoftmax: return "masked_softmax";
    case OpKind::kMaskedMean: return "masked_mean";
    case OpKind::kReshape: return "reshape";
    case OpKind::kCustom: return "custom";
  }
  return "unknown";
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

using Mask = std::vector<std::uint8_t>;

/// Receives the output gradient and one gradient buffer per input (already
/// shaped and zero-filled, or unset when that input needs no gradient).
using CustomBackward = std::function<void(const Tensor& out_grad, std::span<Tensor> input_grads)>;

/// Reverse-mode computation record. Nodes are appended in evaluation order,
/// so every node's inputs precede it and the record is acyclic by
/// construction. Masks passed to masked ops are constants for backward.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.value;
  }
  OpKind op(std::size_t id) const { return nodes_[id].op; }

  // --- leaves -------------------------------------------------------------

  Var constant(Tensor value) {
    Node n{OpKind::kConstant};
    n.value = std::move(value);
    return push(std::move(n));
  }
  Var scalar(double value) { return constant(Tensor::scalar(value)); }

  /// Leaf whose gradient accumulates into `p.grad` during backward.
  Var param(Parameter& p) {
    Node n{OpKind::kParam};
    n.external = &p.value;
    n.target = &p;
    n.needs_grad = true;
    return push(std::move(n));
  }
  /// Read-only leaf over a parameter (inference).
  Var param(const Parameter& p) {
    Node n{OpKind::kParam};
    n.external = &p.value;
    return push(std::move(n));
  }

  /// Copies the listed rows of `p` into a k x cols node; backward scatters
  /// into the matching rows of `p.grad`.
  Var gather_rows(Parameter& p, std::span<const std::size_t> rows) {
    Var out = gather_impl(p, rows);
    nodes_[out.id()].target = &p;
    nodes_[out.id()].needs_grad = true;
    return out;
  }
  Var gather_rows(const Parameter& p, std::span<const std::size_t> rows) {
    return gather_impl(p, rows);
  }

  // --- binary elementwise (shapes equal, or rhs/lhs is 1x1 or a 1xC row) ---

  Var add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }

  Var matmul(Var a, Var b) {
    const Tensor& x = value(a.id());
    const Tensor& y = value(b.id());
    if (x.cols() != y.rows()) {
      throw ShapeError("matmul: " + x.shape_string() + " by " + y.shape_string());
    }
    Node n{OpKind::kMatMul};
    n.value = Tensor(x.rows(), y.cols());
    n.value.matrix().noalias() = x.matrix() * y.matrix();
    return push_op(std::move(n), {a, b});
  }

  /// Joins inputs with equal row counts side by side.
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rows = value(parts[0].id()).rows();
    std::size_t cols = 0;
    for (Var p : parts) {
      if (value(p.id()).rows() != rows) throw ShapeError("concat: row counts differ");
      cols += value(p.id()).cols();
    }
    Node n{OpKind::kConcat};
    n.value = Tensor(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
      const Tensor& t = value(p.id());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < t.cols(); ++c) n.value(r, offset + c) = t(r, c);
      }
      offset += t.cols();
    }
    return push_op(std::move(n), parts);
  }

  // --- unary ----------------------------------------------------------------

  Var tanh(Var x) {
    return unary(OpKind::kTanh, x, [](double v) { return std::tanh(v); });
  }
  Var sigmoid(Var x) {
    return unary(OpKind::kSigmoid, x, [](double v) { return snm::sigmoid(v); });
  }
  Var relu(Var x) {
    return unary(OpKind::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; });
  }
  Var log(Var x) {
    return unary(OpKind::kLog, x, [](double v) { return std::log(v); });
  }
  Var log_sigmoid(Var x) {
    return unary(OpKind::kLogSigmoid, x, [](double v) { return snm::log_sigmoid(v); });
  }
  Var clamp(Var x, double lo, double hi) {
    Var out = unary(OpKind::kClamp, x, [lo, hi](double v) { return std::clamp(v, lo, hi); });
    nodes_[out.id()].a = lo;
    nodes_[out.id()].b = hi;
    return out;
  }
  /// scale * x + shift
  Var affine(Var x, double scale, double shift) {
    Var out = unary(OpKind::kAffine, x,
                    [scale, shift](double v) { return scale * v + shift; });
    nodes_[out.id()].a = scale;
    return out;
  }

  Var reshape(Var x, std::size_t rows, std::size_t cols) {
    const Tensor& t = value(x.id());
    if (rows * cols != t.size()) {
      throw ShapeError("reshape: " + t.shape_string() + " to " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
    Node n{OpKind::kReshape};
    n.value = Tensor(rows, cols, t.storage());
    return push_op(std::move(n), {x});
  }

  // --- reductions -----------------------------------------------------------

  Var sum(Var x) {
    const Tensor& t = value(x.id());
    double s = 0.0;
    for (double v : t.values()) s += v;
    Node n{OpKind::kSum};
    n.value = Tensor::scalar(s);
    return push_op(std::move(n), {x});
  }

  Var dot(Var a, Var b) {
    const Tensor& x = value(a.id());
    const Tensor& y = value(b.id());
    if (x.size() != y.size() || !x.is_vector() || !y.is_vector()) {
      throw ShapeError("dot: " + x.shape_string() + " with " + y.shape_string());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    Node n{OpKind::kDot};
    n.value = Tensor::scalar(s);
    return push_op(std::move(n), {a, b});
  }

  /// Softmax restricted to entries with mask != 0; masked-out outputs are
  /// exactly zero. A fully masked input is an error.
  Var masked_softmax(Var x, Mask mask) {
    const Tensor& t = value(x.id());
    check_mask(t, mask, "masked_softmax");
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (mask[i]) peak = std::max(peak, t[i]);
    }
    Node n{OpKind::kMaskedSoftmax};
    n.value = Tensor(t.rows(), t.cols());
    double total = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (mask[i]) {
        n.value[i] = std::exp(t[i] - peak);
        total += n.value[i];
      }
    }
    for (double& v : n.value.values()) v /= total;
    n.mask = std::move(mask);
    return push_op(std::move(n), {x});
  }

  /// Mean over entries with mask != 0, as a 1x1. A fully masked input is an
  /// error.
  Var masked_mean(Var x, Mask mask) {
    const Tensor& t = value(x.id());
    check_mask(t, mask, "masked_mean");
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (mask[i]) {
        s += t[i];
        ++count;
      }
    }
    Node n{OpKind::kMaskedMean};
    n.value = Tensor::scalar(s / static_cast<double>(count));
    n.mask = std::move(mask);
    return push_op(std::move(n), {x});
  }

  /// Escape hatch for operations outside the built-in set.
  Var custom(std::span<const Var> inputs, Tensor value, CustomBackward backward) {
    Node n{OpKind::kCustom};
    n.value = std::move(value);
    n.custom = std::move(backward);
    return push_op(std::move(n), inputs);
  }

  /// Accumulates d(loss)/d(param) into every reachable mutable Parameter.
  void backward(Var loss) {
    if (!value(loss.id()).is_scalar()) {
      throw ShapeError("backward: loss must be scalar, got " + value(loss.id()).shape_string());
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[loss.id()] = Tensor::scalar(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (!nodes_[i].needs_grad || grads[i].empty()) continue;
      propagate(i, grads);
    }
  }

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs{};
    Tensor value{};
    const Tensor* external = nullptr;
    Parameter* target = nullptr;
    std::vector<std::size_t> rows{};
    Mask mask{};
    double a = 0.0;
    double b = 0.0;
    bool needs_grad = false;
    CustomBackward custom{};
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var push_op(Node n, std::span<const Var> inputs) {
    for (Var v : inputs) {
      n.inputs.push_back(v.id());
      n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    }
    if (!n.value.all_finite()) {
      throw NumericError(std::string("non-finite output from ") + std::string(op_name(n.op)));
    }
    return push(std::move(n));
  }
  Var push_op(Node n, std::initializer_list<Var> inputs) {
    return push_op(std::move(n), std::span<const Var>(inputs.begin(), inputs.size()));
  }

  Var gather_impl(const Parameter& p, std::span<const std::size_t> rows) {
    if (rows.empty()) throw ShapeError("gather_rows: empty index list");
    const Tensor& src = p.value;
    Node n{OpKind::kGather};
    n.value = Tensor(rows.size(), src.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] >= src.rows()) {
        throw ShapeError("gather_rows: row " + std::to_string(rows[k]) + " out of range for " +
                         p.name);
      }
      std::copy_n(src.row_span(rows[k]).begin(), src.cols(), n.value.row_span(k).begin());
    }
    n.rows.assign(rows.begin(), rows.end());
    return push(std::move(n));
  }

  static void check_mask(const Tensor& t, const Mask& mask, const char* what) {
    if (!t.is_vector()) throw ShapeError(std::string(what) + ": input must be a vector");
    if (mask.size() != t.size()) throw ShapeError(std::string(what) + ": mask size mismatch");
    if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
      throw ShapeError(std::string(what) + ": every entry is masked out");
    }
  }

  // Offset into `t` for output coordinate (r, c) under the broadcast rule.
  static std::size_t broadcast_at(const Tensor& t, std::size_t r, std::size_t c) {
    if (t.is_scalar()) return 0;
    if (t.rows() == 1) return c;
    return r * t.cols() + c;
  }

  static std::array<std::size_t, 2> broadcast_shape(const Tensor& x, const Tensor& y) {
    if (x.same_shape(y)) return x.shape();
    auto fits = [](const Tensor& small, const Tensor& big) {
      return small.is_scalar() || (small.rows() == 1 && small.cols() == big.cols());
    };
    if (fits(y, x)) return x.shape();
    if (fits(x, y)) return y.shape();
    throw ShapeError("cannot broadcast " + x.shape_string() + " with " + y.shape_string());
  }

  Var binary(OpKind op, Var a, Var b) {
    const Tensor& x = value(a.id());
    const Tensor& y = value(b.id());
    const auto [rows, cols] = broadcast_shape(x, y);
    Node n{op};
    n.value = Tensor(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double u = x[broadcast_at(x, r, c)];
        const double v = y[broadcast_at(y, r, c)];
        n.value(r, c) = op == OpKind::kAdd ? u + v : op == OpKind::kSub ? u - v : u * v;
      }
    }
    return push_op(std::move(n), {a, b});
  }

  template <class F>
  Var unary(OpKind op, Var x, F&& f) {
    const Tensor& t = value(x.id());
    Node n{op};
    n.value = Tensor(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i) n.value[i] = f(t[i]);
    return push_op(std::move(n), {x});
  }

  Tensor& grad_for(std::vector<Tensor>& grads, std::size_t id) {
    if (grads[id].empty()) {
      const Tensor& v = value(id);
      grads[id] = Tensor(v.rows(), v.cols());
    }
    return grads[id];
  }

  void propagate(std::size_t id, std::vector<Tensor>& grads) {
    const Node& n = nodes_[id];
    const Tensor& g = grads[id];
    const Tensor& out = value(id);
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
    auto in = [&](std::size_t k) -> const Tensor& { return value(n.inputs[k]); };
    auto gin = [&](std::size_t k) -> Tensor& { return grad_for(grads, n.inputs[k]); };

    switch (n.op) {
      case OpKind::kConstant:
        return;
      case OpKind::kParam:
        n.target->grad.matrix() += g.matrix();
        return;
      case OpKind::kGather:
        for (std::size_t k = 0; k < n.rows.size(); ++k) {
          auto dst = n.target->grad.row_span(n.rows[k]);
          auto src = g.row_span(k);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        return;
      case OpKind::kMatMul:
        if (wants(0)) gin(0).matrix().noalias() += g.matrix() * in(1).matrix().transpose();
        if (wants(1)) gin(1).matrix().noalias() += in(0).matrix().transpose() * g.matrix();
        return;
      case OpKind::kAdd:
      case OpKind::kSub:
      case OpKind::kMul: {
        const Tensor& x = in(0);
        const Tensor& y = in(1);
        Tensor* gx = wants(0) ? &gin(0) : nullptr;
        Tensor* gy = wants(1) ? &gin(1) : nullptr;
        for (std::size_t r = 0; r < out.rows(); ++r) {
          for (std::size_t c = 0; c < out.cols(); ++c) {
            const double d = g(r, c);
            const std::size_t ix = broadcast_at(x, r, c);
            const std::size_t iy = broadcast_at(y, r, c);
            if (n.op == OpKind::kMul) {
              if (gx) (*gx)[ix] += d * y[iy];
              if (gy) (*gy)[iy] += d * x[ix];
            } else {
              if (gx) (*gx)[ix] += d;
              if (gy) (*gy)[iy] += n.op == OpKind::kAdd ? d : -d;
            }
          }
        }
        return;
      }
      case OpKind::kConcat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t width = in(k).cols();
          if (wants(k)) {
            Tensor& dst = gin(k);
            for (std::size_t r = 0; r < out.rows(); ++r) {
              for (std::size_t c = 0; c < width; ++c) dst(r, c) += g(r, offset + c);
            }
          }
          offset += width;
        }
        return;
      }
      case OpKind::kTanh: {
        Tensor& dx = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += g[i] * (1.0 - out[i] * out[i]);
        return;
      }
      case OpKind::kSigmoid: {
        Tensor& dx = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += g[i] * out[i] * (1.0 - out[i]);
        return;
      }
      case OpKind::kRelu: {
        Tensor& dx = gin(0);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += x[i] > 0.0 ? g[i] : 0.0;
        return;
      }
      case OpKind::kLog: {
        Tensor& dx = gin(0);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += g[i] / x[i];
        return;
      }
      case OpKind::kLogSigmoid: {
        Tensor& dx = gin(0);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += g[i] * snm::sigmoid(-x[i]);
        return;
      }
      case OpKind::kClamp: {
        Tensor& dx = gin(0);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (x[i] > n.a && x[i] < n.b) dx[i] += g[i];
        }
        return;
      }
      case OpKind::kAffine: {
        Tensor& dx = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += g[i] * n.a;
        return;
      }
      case OpKind::kReshape: {
        Tensor& dx = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i) dx[i] += g[i];
        return;
      }
      case OpKind::kSum: {
        Tensor& dx = gin(0);
        for (double& v : dx.values()) v += g[0];
        return;
      }
      case OpKind::kDot: {
        const Tensor& x = in(0);
        const Tensor& y = in(1);
        if (wants(0)) {
          Tensor& dx = gin(0);
          for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[0] * y[i];
        }
        if (wants(1)) {
          Tensor& dy = gin(1);
          for (std::size_t i = 0; i < y.size(); ++i) dy[i] += g[0] * x[i];
        }
        return;
      }
      case OpKind::kMaskedSoftmax: {
        double weighted = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) weighted += out[i] * g[i];
        Tensor& dx = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (n.mask[i]) dx[i] += out[i] * (g[i] - weighted);
        }
        return;
      }
      case OpKind::kMaskedMean: {
        const auto count =
            static_cast<double>(std::count_if(n.mask.begin(), n.mask.end(),
                                              [](std::uint8_t m) { return m != 0; }));
        Tensor& dx = gin(0);
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (n.mask[i]) dx[i] += g[0] / count;
        }
        return;
      }
      case OpKind::kCustom: {
        std::vector<Tensor> local(n.inputs.size());
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (wants(k)) local[k] = Tensor(in(k).rows(), in(k).cols());
        }
        n.custom(g, local);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (wants(k)) gin(k).matrix() += local[k].matrix();
        }
        return;
      }
    }
  }

  // deque: references to existing nodes survive push_back
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

inline Var operator+(Var a, Var b) { return a.tape()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape()->mul(a, b); }

inline Var matmul(Var a, Var b) { return a.tape()->matmul(a, b); }
inline Var tanh(Var x) { return x.tape()->tanh(x); }
inline Var sigmoid(Var x) { return x.tape()->sigmoid(x); }
inline Var relu(Var x) { return x.tape()->relu(x); }
inline Var log(Var x) { return x.tape()->log(x); }
inline Var log_sigmoid(Var x) { return x.tape()->log_sigmoid(x); }
inline Var sum(Var x) { return x.tape()->sum(x); }
inline Var dot(Var a, Var b) { return a.tape()->dot(a, b); }
inline Var affine(Var x, double scale, double shift) { return x.tape()->affine(x, scale, shift); }

}  // namespace snm
