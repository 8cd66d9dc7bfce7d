#pragma once

// Reverse-mode automatic differentiation over rank <= 2 dense arrays.
//
// A Tape records every operation of one forward pass. `backward` walks the
// nodes once in reverse insertion order and accumulates into the Parameter
// gradient accumulators. Every op output is checked for NaN/Inf.


#include <cstdint>
#include <functional>
#include <memory>
#include <string_view>
#include <unordered_map>

#include "pebble/tensor.hpp"

namespace pebble {

enum class Op : std::uint8_t {
  constant,
  parameter,
  matmul,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  tanh,
  sigmoid,
  relu,
  exp,
  log,
  sqrt,
  softplus,
  square,
  concat,
  vstack,
  slice,
  gather_rows,
  pick,
  sum,
  mean,
  row_sum,
  squared_difference,
  softmax,
  log_softmax,
  stop_gradient,
  row_norm,
  mask_rows,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::constant: return "constant";
    case Op::parameter: return "parameter";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "elementwise-mul";
    case Op::div: return "div";
    case Op::scale: return "scalar-scale";
    case Op::add_scalar: return "add-scalar";
    case Op::tanh: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sqrt: return "sqrt";
    case Op::softplus: return "softplus";
    case Op::square: return "square";
    case Op::concat: return "concat";
    case Op::vstack: return "vstack";
    case Op::slice: return "slice";
    case Op::gather_rows: return "gather-rows";
    case Op::pick: return "pick";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::row_sum: return "row-sum";
    case Op::squared_difference: return "squared-difference";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log-softmax";
    case Op::stop_gradient: return "stop-gradient";
    case Op::row_norm: return "row-norm";
    case Op::mask_rows: return "mask-rows";
  }
  return "?";
}

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const {
    if (!tape_) throw std::logic_error("use of an unbound Var");
    return *tape_;
  }
  std::uint32_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  struct Node {
    Op op = Op::constant;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    std::vector<std::size_t> index;  // gather/pick indices, slice bounds
    std::vector<double> mask;        // mask_rows keep flags
    double scalar = 0.0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Node n;
    n.op = Op::constant;
    n.value = std::move(value);
    if (!n.value.all_finite()) throw NumericError("constant contains non-finite entries");
    return push(std::move(n));
  }

  /// Leaf bound to a parameter; repeated calls share one node.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Node n;
    n.op = Op::parameter;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = !p.frozen;
    Var v = push(std::move(n));
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var record(Op op, std::vector<std::uint32_t> inputs, Tensor value) {
    return record(op, std::move(inputs), std::move(value), Node());
  }

  Var record(Op op, std::vector<std::uint32_t> inputs, Tensor value, Node extra) {
    if (!value.all_finite()) {
      std::string msg = std::string(op_name(op)) + " produced non-finite output; input shapes";
      for (auto i : inputs) msg += " " + nodes_[i].value.shape().str();
      throw NumericError(msg);
    }
    extra.op = op;
    extra.value = std::move(value);
    bool rg = false;
    if (op != Op::stop_gradient)
      for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
    extra.inputs = std::move(inputs);
    extra.requires_grad = rg;
    return push(std::move(extra));
  }

  const Node& node(std::uint32_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse pass from a scalar root; adds d(root)/d(param) into every
  /// non-frozen parameter's accumulator.
  void backward(Var root) {
    if (root.tape_ != this) throw std::invalid_argument("backward: root belongs to another tape");
    const auto& rv = nodes_[root.id_].value;
    if (rv.size() != 1) throw ShapeError("backward: root must be scalar, got " + rv.shape().str());
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    seed(root.id_).fill(1.0);
    for (std::size_t k = root.id_ + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.has_grad || !n.requires_grad) continue;
      propagate(k);
      if (n.op == Op::parameter && n.param && !n.param->frozen) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  /// Gradient of the last backward root with respect to `v` (zeros if no path).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id_);
    if (!n.has_grad) return Tensor(n.value.shape());
    return n.grad;
  }

 private:
  friend class Var;

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Tensor& seed(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  // Accumulate `g` (shaped like the op output, possibly broadcast) into
  // input `id`, summing over broadcast dimensions.
  void accumulate_reduced(std::uint32_t id, const Tensor& g) {
    Node& in = nodes_[id];
    if (!in.requires_grad) return;
    Tensor& dst = seed(id);
    const std::size_t r = g.rows(), c = g.cols();
    const std::size_t ir = in.value.rows(), ic = in.value.cols();
    if (ir == r && ic == c) {
      auto d = dst.data();
      auto s = g.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
      return;
    }
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[(ir == 1 ? 0 : i) * ic + (ic == 1 ? 0 : j)] += g(i, j);
  }

  template <typename F>
  void accumulate_map(std::uint32_t id, F&& f) {
    Node& in = nodes_[id];
    if (!in.requires_grad) return;
    Tensor& dst = seed(id);
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += f(i);
  }

  void propagate(std::size_t k);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape().node(id_).value; }

namespace detail {

// Plain row-major kernels. Each output row depends only on the matching
// input row, so results do not change with the batch size.

// c += a * b ; a: n x k, b: k x m
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* A = a.data().data();
  const double* Bm = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = Bm + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c += g * b^T ; g: n x m, b: k x m, c: n x k
inline void gemm_nt(const Tensor& g, const Tensor& b, Tensor& c) {
  const std::size_t n = g.rows(), m = g.cols(), k = b.rows();
  const double* G = g.data().data();
  const double* Bm = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double* gi = G + i * m;
      const double* bp = Bm + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
      C[i * k + p] += s;
    }
}

// c += a^T * g ; a: n x k, g: n x m, c: k x m
inline void gemm_tn(const Tensor& a, const Tensor& g, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = g.cols();
  const double* A = a.data().data();
  const double* G = g.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* gi = G + i * m;
      double* cp = C + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * gi[j];
    }
}

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return a.tape();
}

inline void fail_shape(Op op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + a.str() + " and " + b.str());
}

/// Output shape of a broadcasting binary op: each matrix dimension must
/// match or be 1.
inline Shape broadcast_shape(Op op, const Shape& a, const Shape& b) {
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    fail_shape(op, a, b);
    return x;
  };
  const std::size_t r = dim(a.rows(), b.rows()), c = dim(a.cols(), b.cols());
  if (a.size() == r * c && a.rows() == r) return a;
  if (b.size() == r * c && b.rows() == r) return b;
  return Shape{r, c};
}

template <typename F>
Tensor broadcast_apply(const Shape& out, const Tensor& a, const Tensor& b, F&& f) {
  Tensor res(out);
  const std::size_t r = out.rows(), c = out.cols();
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  if (ar == r && ac == c && br == r && bc == c) {
    for (std::size_t i = 0; i < res.size(); ++i) res[i] = f(a[i], b[i]);
    return res;
  }
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      res[i * c + j] = f(a[(ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j)], b[(br == 1 ? 0 : i) * bc + (bc == 1 ? 0 : j)]);
  return res;
}

inline double bval(const Tensor& t, std::size_t i, std::size_t j) {
  return t[(t.rows() == 1 ? 0 : i) * t.cols() + (t.cols() == 1 ? 0 : j)];
}

template <typename F>
Var unary(Op op, const Var& a, F&& f, double scalar = 0.0) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Tape::Node extra;
  extra.scalar = scalar;
  return a.tape().record(op, {a.id()}, std::move(out), std::move(extra));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

// ---- operations ----------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape().rank() == 0 || bv.shape().rank() == 0 || av.cols() != bv.rows())
    detail::fail_shape(Op::matmul, av.shape(), bv.shape());
  Shape out_shape = av.shape().rank() == 1 ? Shape{bv.cols()} : Shape{av.rows(), bv.cols()};
  Tensor out(out_shape);
  detail::gemm_nn(av, bv, out);
  return t.record(Op::matmul, {a.id(), b.id()}, std::move(out));
}

#define PEBBLE_BINARY_OP(NAME, OPKIND, EXPR)                                          \
  inline Var NAME(const Var& a, const Var& b) {                                     \
    Tape& t = detail::same_tape(a, b);                                              \
    Shape s = detail::broadcast_shape(OPKIND, a.shape(), b.shape());                \
    Tensor out = detail::broadcast_apply(s, a.value(), b.value(), [](double x, double y) { return EXPR; }); \
    return t.record(OPKIND, {a.id(), b.id()}, std::move(out));                      \
  }

PEBBLE_BINARY_OP(add, Op::add, x + y)
PEBBLE_BINARY_OP(sub, Op::sub, x - y)
PEBBLE_BINARY_OP(mul, Op::mul, x* y)
PEBBLE_BINARY_OP(div, Op::div, x / y)

#undef PEBBLE_BINARY_OP

inline Var squared_difference(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::fail_shape(Op::squared_difference, a.shape(), b.shape());
  Tensor out(a.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = av[i] - bv[i];
    out[i] = d * d;
  }
  return t.record(Op::squared_difference, {a.id(), b.id()}, std::move(out));
}

inline Var scale(const Var& a, double c) {
  return detail::unary(Op::scale, a, [c](double x) { return c * x; }, c);
}
inline Var add_scalar(const Var& a, double c) {
  return detail::unary(Op::add_scalar, a, [c](double x) { return x + c; }, c);
}
inline Var tanh(const Var& a) { return detail::unary(Op::tanh, a, [](double x) { return std::tanh(x); }); }
inline Var sigmoid(const Var& a) { return detail::unary(Op::sigmoid, a, detail::sigmoid); }
inline Var relu(const Var& a) { return detail::unary(Op::relu, a, [](double x) { return x > 0 ? x : 0.0; }); }
inline Var exp(const Var& a) { return detail::unary(Op::exp, a, [](double x) { return std::exp(x); }); }
inline Var log(const Var& a) { return detail::unary(Op::log, a, [](double x) { return std::log(x); }); }
inline Var sqrt(const Var& a) { return detail::unary(Op::sqrt, a, [](double x) { return std::sqrt(x); }); }
inline Var softplus(const Var& a) { return detail::unary(Op::softplus, a, detail::softplus); }
inline Var square(const Var& a) { return detail::unary(Op::square, a, [](double x) { return x * x; }); }

/// Forward identity; blocks every gradient path through it.
inline Var stop_gradient(const Var& a) {
  return a.tape().record(Op::stop_gradient, {a.id()}, a.value());
}

/// Concatenate along the last axis. Inputs must share their row count.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = parts.front().tape();
  const Shape& first = parts.front().shape();
  const std::size_t r = first.rows();
  std::size_t c = 0;
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    if (&p.tape() != &t) throw std::invalid_argument("concat: operands on different tapes");
    if (p.rows() != r || p.shape().rank() != first.rank() || p.shape().rank() == 0)
      detail::fail_shape(Op::concat, first, p.shape());
    c += p.cols();
    ids.push_back(p.id());
  }
  Tensor out(first.rank() == 1 ? Shape{c} : Shape{r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.row(i).begin(), v.cols(), out.row(i).begin() + static_cast<std::ptrdiff_t>(off));
    off += v.cols();
  }
  return t.record(Op::concat, std::move(ids), std::move(out));
}

/// Stack matrices with equal column counts along the row axis.
inline Var vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("vstack: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    if (&p.tape() != &t) throw std::invalid_argument("vstack: operands on different tapes");
    if (p.cols() != c || p.shape().rank() == 0) detail::fail_shape(Op::vstack, parts.front().shape(), p.shape());
    r += p.rows();
    ids.push_back(p.id());
  }
  Tensor out(Shape{r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += src.size();
  }
  return t.record(Op::vstack, std::move(ids), std::move(out));
}

/// Columns [begin, end) along the last axis.
inline Var slice(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.cols() || av.shape().rank() == 0)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     av.shape().str());
  const std::size_t r = av.rows(), w = end - begin;
  Tensor out(av.shape().rank() == 1 ? Shape{w} : Shape{r, w});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.row(i).begin() + static_cast<std::ptrdiff_t>(begin), w, out.row(i).begin());
  Tape::Node extra;
  extra.index = {begin, end};
  return a.tape().record(Op::slice, {a.id()}, std::move(out), std::move(extra));
}

/// Rows of a matrix selected (with repetition allowed) by `rows`.
inline Var gather_rows(const Var& a, std::vector<std::size_t> rows) {
  const Tensor& av = a.value();
  if (av.shape().rank() != 2) throw ShapeError("gather-rows: expected matrix, got " + av.shape().str());
  Tensor out(Shape{rows.size(), av.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows())
      throw ShapeError("gather-rows: row " + std::to_string(rows[i]) + " out of " + av.shape().str());
    std::copy_n(av.row(rows[i]).begin(), av.cols(), out.row(i).begin());
  }
  Tape::Node extra;
  extra.index = std::move(rows);
  return a.tape().record(Op::gather_rows, {a.id()}, std::move(out), std::move(extra));
}

/// Contiguous block of rows [begin, end) of a matrix.
inline Var rows_range(const Var& a, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return gather_rows(a, std::move(idx));
}

/// One entry per row: out[i] = a[i, cols[i]]; result is rows x 1.
inline Var pick(const Var& a, std::vector<std::size_t> cols) {
  const Tensor& av = a.value();
  if (cols.size() != av.rows()) throw ShapeError("pick: index count does not match rows of " + av.shape().str());
  Tensor out(Shape{av.rows(), 1});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= av.cols()) throw ShapeError("pick: column out of range for " + av.shape().str());
    out[i] = av(i, cols[i]);
  }
  Tape::Node extra;
  extra.index = std::move(cols);
  return a.tape().record(Op::pick, {a.id()}, std::move(out), std::move(extra));
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.tape().record(Op::sum, {a.id()}, Tensor::scalar(s));
}

inline Var mean(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.tape().record(Op::mean, {a.id()}, Tensor::scalar(s / static_cast<double>(a.value().size())));
}

/// Per-row sum; result is rows x 1.
inline Var row_sum(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(Shape{av.rows(), 1});
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double s = 0.0;
    for (double x : av.row(i)) s += x;
    out[i] = s;
  }
  return a.tape().record(Op::row_sum, {a.id()}, std::move(out));
}

/// Per-row Euclidean norm; result is rows x 1. The gradient at a zero row
/// is taken as zero.
inline Var row_norm(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(Shape{av.rows(), 1});
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double s = 0.0;
    for (double x : av.row(i)) s += x * x;
    out[i] = std::sqrt(s);
  }
  return a.tape().record(Op::row_norm, {a.id()}, std::move(out));
}

inline Var softmax(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto in = av.row(i);
    auto o = out.row(i);
    const double m = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (o[j] = std::exp(in[j] - m));
    for (auto& x : o) x /= z;
  }
  return a.tape().record(Op::softmax, {a.id()}, std::move(out));
}

inline Var log_softmax(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto in = av.row(i);
    auto o = out.row(i);
    const double m = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double x : in) z += std::exp(x - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] - lz;
  }
  return a.tape().record(Op::log_softmax, {a.id()}, std::move(out));
}

/// Rows with keep[i] == 0 become exactly zero; other rows pass through.
inline Var mask_rows(const Var& a, std::vector<double> keep) {
  const Tensor& av = a.value();
  if (keep.size() != av.rows()) throw ShapeError("mask-rows: flag count does not match " + av.shape().str());
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.rows(); ++i)
    if (keep[i] != 0.0) std::copy_n(av.row(i).begin(), av.cols(), out.row(i).begin());
  Tape::Node extra;
  extra.mask = std::move(keep);
  return a.tape().record(Op::mask_rows, {a.id()}, std::move(out), std::move(extra));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// ---- backward rules ------------------------------------------------------

inline void Tape::propagate(std::size_t k) {
  // Copy what we need: seeding inputs may reallocate nothing (nodes_ is not
  // resized during backward), so references stay valid.
  Node& n = nodes_[k];
  const Tensor& g = n.grad;
  const auto& in = n.inputs;
  auto val = [&](std::size_t i) -> const Tensor& { return nodes_[in[i]].value; };

  switch (n.op) {
    case Op::constant:
    case Op::parameter:
    case Op::stop_gradient:
      return;
    case Op::matmul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (nodes_[in[0]].requires_grad) {
        Tensor& da = seed(in[0]);
        detail::gemm_nt(g, b, da);
      }
      if (nodes_[in[1]].requires_grad) {
        Tensor& db = seed(in[1]);
        detail::gemm_tn(a, g, db);
      }
      return;
    }
    case Op::add:
      accumulate_reduced(in[0], g);
      accumulate_reduced(in[1], g);
      return;
    case Op::sub: {
      accumulate_reduced(in[0], g);
      if (nodes_[in[1]].requires_grad) {
        Tensor neg(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        accumulate_reduced(in[1], neg);
      }
      return;
    }
    case Op::mul:
    case Op::div: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const std::size_t r = g.rows(), c = g.cols();
      const bool is_div = n.op == Op::div;
      if (nodes_[in[0]].requires_grad) {
        Tensor t(g.shape());
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double bv = detail::bval(b, i, j);
            t[i * c + j] = is_div ? g[i * c + j] / bv : g[i * c + j] * bv;
          }
        accumulate_reduced(in[0], t);
      }
      if (nodes_[in[1]].requires_grad) {
        Tensor t(g.shape());
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double av = detail::bval(a, i, j);
            const double bv = detail::bval(b, i, j);
            t[i * c + j] = is_div ? -g[i * c + j] * av / (bv * bv) : g[i * c + j] * av;
          }
        accumulate_reduced(in[1], t);
      }
      return;
    }
    case Op::squared_difference: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      accumulate_map(in[0], [&](std::size_t i) { return 2.0 * (a[i] - b[i]) * g[i]; });
      accumulate_map(in[1], [&](std::size_t i) { return -2.0 * (a[i] - b[i]) * g[i]; });
      return;
    }
    case Op::scale:
      accumulate_map(in[0], [&](std::size_t i) { return n.scalar * g[i]; });
      return;
    case Op::add_scalar:
      accumulate_map(in[0], [&](std::size_t i) { return g[i]; });
      return;
    case Op::tanh:
      accumulate_map(in[0], [&](std::size_t i) { return g[i] * (1.0 - n.value[i] * n.value[i]); });
      return;
    case Op::sigmoid:
      accumulate_map(in[0], [&](std::size_t i) { return g[i] * n.value[i] * (1.0 - n.value[i]); });
      return;
    case Op::relu: {
      const Tensor& a = val(0);
      accumulate_map(in[0], [&](std::size_t i) { return a[i] > 0 ? g[i] : 0.0; });
      return;
    }
    case Op::exp:
      accumulate_map(in[0], [&](std::size_t i) { return g[i] * n.value[i]; });
      return;
    case Op::log: {
      const Tensor& a = val(0);
      accumulate_map(in[0], [&](std::size_t i) { return g[i] / a[i]; });
      return;
    }
    case Op::sqrt:
      accumulate_map(in[0], [&](std::size_t i) { return n.value[i] > 0 ? g[i] / (2.0 * n.value[i]) : 0.0; });
      return;
    case Op::softplus: {
      const Tensor& a = val(0);
      accumulate_map(in[0], [&](std::size_t i) { return g[i] * detail::sigmoid(a[i]); });
      return;
    }
    case Op::square: {
      const Tensor& a = val(0);
      accumulate_map(in[0], [&](std::size_t i) { return 2.0 * a[i] * g[i]; });
      return;
    }
    case Op::concat: {
      const std::size_t r = g.rows(), c = g.cols();
      std::size_t off = 0;
      for (auto id : in) {
        const std::size_t w = nodes_[id].value.cols();
        if (nodes_[id].requires_grad) {
          Tensor& d = seed(id);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) d[i * w + j] += g[i * c + off + j];
        }
        off += w;
      }
      return;
    }
    case Op::vstack: {
      std::size_t off = 0;
      for (auto id : in) {
        const std::size_t cnt = nodes_[id].value.size();
        if (nodes_[id].requires_grad) {
          Tensor& d = seed(id);
          for (std::size_t i = 0; i < cnt; ++i) d[i] += g[off + i];
        }
        off += cnt;
      }
      return;
    }
    case Op::slice: {
      if (!nodes_[in[0]].requires_grad) return;
      Tensor& d = seed(in[0]);
      const std::size_t b = n.index[0], w = n.index[1] - n.index[0];
      const std::size_t ac = d.cols();
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) d[i * ac + b + j] += g[i * w + j];
      return;
    }
    case Op::gather_rows: {
      if (!nodes_[in[0]].requires_grad) return;
      Tensor& d = seed(in[0]);
      const std::size_t c = g.cols();
      for (std::size_t i = 0; i < n.index.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) d[n.index[i] * c + j] += g[i * c + j];
      return;
    }
    case Op::pick: {
      if (!nodes_[in[0]].requires_grad) return;
      Tensor& d = seed(in[0]);
      const std::size_t c = d.cols();
      for (std::size_t i = 0; i < n.index.size(); ++i) d[i * c + n.index[i]] += g[i];
      return;
    }
    case Op::sum:
      accumulate_map(in[0], [&](std::size_t) { return g[0]; });
      return;
    case Op::mean: {
      const double s = g[0] / static_cast<double>(val(0).size());
      accumulate_map(in[0], [&](std::size_t) { return s; });
      return;
    }
    case Op::row_sum: {
      const std::size_t c = val(0).cols();
      accumulate_map(in[0], [&](std::size_t i) { return g[i / c]; });
      return;
    }
    case Op::row_norm: {
      const Tensor& a = val(0);
      const std::size_t c = a.cols();
      accumulate_map(in[0], [&](std::size_t i) {
        const double nv = n.value[i / c];
        return nv > 0 ? g[i / c] * a[i] / nv : 0.0;
      });
      return;
    }
    case Op::softmax: {
      if (!nodes_[in[0]].requires_grad) return;
      Tensor& d = seed(in[0]);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += y(i, j) * (g(i, j) - dot);
      }
      return;
    }
    case Op::log_softmax: {
      if (!nodes_[in[0]].requires_grad) return;
      Tensor& d = seed(in[0]);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) gs += g(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
      }
      return;
    }
    case Op::mask_rows: {
      const std::size_t c = g.cols();
      accumulate_map(in[0], [&](std::size_t i) { return n.mask[i / c] != 0.0 ? g[i] : 0.0; });
      return;
    }
  }
}

// ---- finite-difference oracle ---------------------------------------------

/// Builds a scalar on a fresh tape from the current parameter values.
using ScalarProgram = std::function<Var(Tape&)>;

/// Max over all coordinates of trainable `params` of
/// |analytic - central difference| / max(1, |analytic|, |numeric|).
/// Parameter accumulators are restored afterwards. Throws if two forward
/// passes at the same point disagree.
inline double finite_diff_check(const ScalarProgram& program, const std::vector<Parameter*>& params,
                                double step = 1e-5) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  auto eval = [&]() {
    Tape t;
    return program(t).value().item();
  };

  std::vector<Tensor> saved;
  for (auto* p : params) {
    saved.push_back(p->grad);
    p->zero_grad();
  }
  double base = 0.0;
  {
    Tape t;
    Var root = program(t);
    base = root.value().item();
    t.backward(root);
  }
  if (eval() != base) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad = saved[i];
    throw std::runtime_error("finite_diff_check: program is not deterministic");
  }

  double worst = 0.0;
  for (auto* p : params) {
    if (p->frozen) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double x0 = p->value[i];
      p->value[i] = x0 + step;
      const double fp = eval();
      p->value[i] = x0 - step;
      const double fm = eval();
      p->value[i] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = p->grad[i];
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad = saved[i];
  return worst;
}

}  // namespace pebble
