#pragma once

// Dense double-precision tensors and a tape for reverse-mode differentiation.
//
// A Tape records every differentiable operation as a node holding its value,
// the ids of its inputs and a closure that pushes the node's gradient back to
// those inputs. Var is a cheap handle (tape pointer + node id). Backward walks
// the nodes in reverse recording order, so each node is visited once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace req2lib {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major dense array. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    for (auto extent : shape_)
      if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_string(shape_));
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    for (auto extent : shape_)
      if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_string(shape_));
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]); }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * shape_[1], shape_[1]); }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Exact bitwise equality, distinguishing -0.0 from 0.0.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.numel() == 0 || std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0);
}

inline double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return s;
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  Var parameter(Tensor value) { return push(std::move(value), true, nullptr); }

  /// Records an op output. The closure is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty() && !node.value.empty()) node.grad = Tensor(node.value.shape());
    return node.grad;
  }

  /// Gradient of the last backward pass with respect to `v`; zeros when `v` was unreachable.
  Tensor grad(Var v) const {
    check_owned(v);
    const auto& node = nodes_[v.id()];
    return node.grad.empty() ? Tensor(node.value.shape()) : node.grad;
  }

  /// Number of nodes whose backward closure ran during the last backward pass.
  std::size_t backward_visits() const noexcept { return visits_; }

  void backward(Var loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss is not recorded on this tape");
    if (loss.id() >= nodes_.size()) throw std::invalid_argument("backward: loss id out of range");
    if (nodes_[loss.id()].value.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_string(nodes_[loss.id()].value.shape()));
    for (auto& node : nodes_) node.grad = Tensor();
    visits_ = 0;
    grad_buffer(loss.id()).fill(1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, id);
      ++visits_;
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool needs_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), needs_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    if (v.tape() != this) throw std::invalid_argument("variable belongs to a different tape");
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->value(id_);
}

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape() || !a.valid()) throw std::invalid_argument("operands live on different tapes");
  return *a.tape();
}

template <class F>
Var unary(Var a, F&& f, std::function<double(double x, double y)> derivative) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (auto& v : out.values()) v = f(v);
  const auto ia = a.id();
  return tape.record(std::move(out), {a}, [ia, derivative = std::move(derivative)](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& x = t.value(ia).values();
    const auto& y = t.value(self).values();
    const auto g = t.grad_buffer(self).values();
    auto ga = t.grad_buffer(ia).values();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * derivative(x[i], y[i]);
  });
}

}  // namespace detail

/// [m x k] * [k x n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
    throw ShapeError("matmul: " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * B(p, j);
    }
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.needs_grad(ia)) {
      const Tensor& Bv = t.value(ib);
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g(i, j) * Bv(p, j);
          ga(i, p) += s;
        }
    }
    if (t.needs_grad(ib)) {
      const Tensor& Av = t.value(ia);
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = Av(i, p);
          for (std::size_t j = 0; j < n; ++j) gb(p, j) += aip * g(i, j);
        }
    }
  });
}

/// [m x k] * [k] -> [m]
inline Var matvec(Var w, Var x) {
  Tape& tape = detail::same_tape(w, x);
  const auto& W = w.value();
  const auto& X = x.value();
  if (W.rank() != 2 || X.rank() != 1 || W.cols() != X.numel())
    throw ShapeError("matvec: " + shape_string(W.shape()) + " x " + shape_string(X.shape()));
  const std::size_t m = W.rows(), k = W.cols();
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    const double* wr = W.values().data() + i * k;
    for (std::size_t p = 0; p < k; ++p) s += wr[p] * X[p];
    out[i] = s;
  }
  const auto iw = w.id(), ix = x.id();
  return tape.record(std::move(out), {w, x}, [iw, ix, m, k](Tape& t, std::size_t self) {
    const auto g = t.grad_buffer(self).values();
    if (t.needs_grad(iw)) {
      const auto xv = t.value(ix).values();
      double* gw = t.grad_buffer(iw).values().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) gw[i * k + p] += gi * xv[p];
      }
    }
    if (t.needs_grad(ix)) {
      const double* wv = t.value(iw).values().data();
      auto gx = t.grad_buffer(ix).values();
      for (std::size_t i = 0; i < m; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) gx[p] += wv[i * k + p] * gi;
      }
    }
  });
}

inline Var transpose(Var a) {
  Tape& tape = *a.tape();
  const auto& A = a.value();
  if (A.rank() != 2) throw ShapeError("transpose: expected matrix, got " + shape_string(A.shape()));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = A(i, j);
  const auto ia = a.id();
  return tape.record(std::move(out), {a}, [ia, m, n](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga(i, j) += g(j, i);
  });
}

/// Elementwise sum. A vector `b` whose length equals the last extent of `a`
/// is broadcast over the rows of `a`.
inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  const bool same = A.shape() == B.shape();
  const bool broadcast = !same && A.rank() == 2 && B.rank() == 1 && A.cols() == B.numel();
  if (!same && !broadcast) throw ShapeError("add: " + shape_string(A.shape()) + " + " + shape_string(B.shape()));
  Tensor out = A;
  const std::size_t nb = B.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i % nb];
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, nb](Tape& t, std::size_t self) {
    const auto g = t.grad_buffer(self).values();
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia).values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad_buffer(ib).values();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

/// Sum of same-shaped operands as a single node.
inline Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no operands");
  Tape& tape = *terms.front().tape();
  Tensor out = terms.front().value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    detail::same_tape(terms.front(), terms[i]);
    const auto& v = terms[i].value();
    if (v.shape() != out.shape()) throw ShapeError("add_n: mismatched shapes");
    for (std::size_t j = 0; j < out.numel(); ++j) out[j] += v[j];
  }
  std::vector<std::size_t> ids;
  for (const auto& v : terms) ids.push_back(v.id());
  return tape.record(std::move(out), terms, [ids](Tape& t, std::size_t self) {
    const auto g = t.grad_buffer(self).values();
    for (auto id : ids) {
      if (!t.needs_grad(id)) continue;
      auto gi = t.grad_buffer(id).values();
      for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) throw ShapeError("mul: " + shape_string(A.shape()) + " * " + shape_string(B.shape()));
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto g = t.grad_buffer(self).values();
    if (t.needs_grad(ia)) {
      const auto bv = t.value(ib).values();
      auto ga = t.grad_buffer(ia).values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      const auto av = t.value(ia).values();
      auto gb = t.grad_buffer(ib).values();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  return detail::unary(
      a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Natural log; every component must be positive.
inline Var log(Var a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw std::domain_error("log of non-positive value");
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Concatenation along the last axis. Operands are all vectors, or all
/// matrices with the same row count.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Tape& tape = *parts.front().tape();
  const std::size_t rank = parts.front().value().rank();
  if (rank != 1 && rank != 2) throw ShapeError("concat: operands must be vectors or matrices");
  const std::size_t rows = rank == 1 ? 1 : parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    const auto& v = p.value();
    if (v.rank() != rank || (rank == 2 && v.rows() != rows)) throw ShapeError("concat: incompatible operand shapes");
    widths.push_back(rank == 1 ? v.numel() : v.cols());
    total += widths.back();
  }
  Tensor out(rank == 1 ? Shape{total} : Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.begin() + r * widths[k], widths[k], out.values().begin() + r * total + offset);
    offset += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return tape.record(std::move(out), parts, [ids, widths, rows, total](Tape& t, std::size_t self) {
    const auto g = t.grad_buffer(self).values();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        auto gk = t.grad_buffer(ids[k]).values();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) gk[r * widths[k] + j] += g[r * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

inline Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

/// Contiguous sub-vector [begin, begin + length).
inline Var slice(Var a, std::size_t begin, std::size_t length) {
  const auto& A = a.value();
  if (A.rank() != 1 || length == 0 || begin + length > A.numel())
    throw ShapeError("slice: [" + std::to_string(begin) + ", +" + std::to_string(length) + ") of " +
                     shape_string(A.shape()));
  Tensor out(Shape{length});
  std::copy_n(A.values().begin() + begin, length, out.values().begin());
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, begin, length](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto g = t.grad_buffer(self).values();
    auto ga = t.grad_buffer(ia).values();
    for (std::size_t i = 0; i < length; ++i) ga[begin + i] += g[i];
  });
}

/// Row `r` of a matrix as a vector.
inline Var row(Var m, std::size_t r) {
  const auto& M = m.value();
  if (M.rank() != 2 || r >= M.rows()) throw ShapeError("row: index " + std::to_string(r) + " of " + shape_string(M.shape()));
  const std::size_t n = M.cols();
  Tensor out(Shape{n});
  std::copy_n(M.values().begin() + r * n, n, out.values().begin());
  const auto im = m.id();
  return m.tape()->record(std::move(out), {m}, [im, r, n](Tape& t, std::size_t self) {
    if (!t.needs_grad(im)) return;
    const auto g = t.grad_buffer(self).values();
    auto gm = t.grad_buffer(im).values();
    for (std::size_t j = 0; j < n; ++j) gm[r * n + j] += g[j];
  });
}

/// Stacks equal-length vectors as the rows of a matrix.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  Tape& tape = *rows.front().tape();
  const std::size_t n = rows.front().value().numel();
  Tensor out(Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::same_tape(rows.front(), rows[r]);
    const auto& v = rows[r].value();
    if (v.rank() != 1 || v.numel() != n) throw ShapeError("stack_rows: rows must be vectors of equal length");
    std::copy(v.values().begin(), v.values().end(), out.values().begin() + r * n);
  }
  std::vector<std::size_t> ids;
  for (const auto& v : rows) ids.push_back(v.id());
  return tape.record(std::move(out), rows, [ids, n](Tape& t, std::size_t self) {
    const auto g = t.grad_buffer(self).values();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (!t.needs_grad(ids[r])) continue;
      auto gr = t.grad_buffer(ids[r]).values();
      for (std::size_t j = 0; j < n; ++j) gr[j] += g[r * n + j];
    }
  });
}

/// Component `i` of a vector as a scalar.
inline Var pick(Var a, std::size_t i) {
  const auto& A = a.value();
  if (A.rank() != 1 || i >= A.numel()) throw ShapeError("pick: index " + std::to_string(i) + " of " + shape_string(A.shape()));
  const auto ia = a.id();
  return a.tape()->record(Tensor::scalar(A[i]), {a}, [ia, i](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    t.grad_buffer(ia)[i] += t.grad_buffer(self)[0];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const auto ia = a.id();
  return a.tape()->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const double g = t.grad_buffer(self)[0];
    for (auto& v : t.grad_buffer(ia).values()) v += g;
  });
}

/// Inverted dropout: kept units are scaled by 1/(1-p). Identity when not training or p == 0.
inline Var dropout(Var a, double p, bool training, std::mt19937_64* rng) {
  if (!training || p == 0.0) return a;
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("dropout probability must lie in [0, 1)");
  if (!rng) throw std::invalid_argument("dropout in training mode needs a random generator");
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(a.value().numel());
  for (auto& m : mask) m = keep(*rng) ? inv : 0.0;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, mask = std::move(mask)](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto g = t.grad_buffer(self).values();
    auto ga = t.grad_buffer(ia).values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

inline bool is_masked(double mask_entry) { return mask_entry == kMasked; }

/// softmax(logits + mask) with mask entries in {0, -inf}. Masked positions are
/// left out of the normalizer and come out as exact zeros; the mask is a constant.
inline Var masked_softmax(Var logits, const Tensor& mask) {
  const auto& z = logits.value();
  if (z.rank() != 1 || mask.shape() != z.shape())
    throw ShapeError("masked_softmax: logits " + shape_string(z.shape()) + ", mask " + shape_string(mask.shape()));
  double top = kMasked;
  std::size_t open = 0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    if (mask[i] != 0.0 && !is_masked(mask[i])) throw std::invalid_argument("masked_softmax: mask entries must be 0 or -inf");
    if (is_masked(mask[i])) continue;
    ++open;
    top = std::isnan(z[i]) || std::isnan(top) ? std::numeric_limits<double>::quiet_NaN() : std::max(top, z[i]);
  }
  if (open == 0) throw std::invalid_argument("masked_softmax: every position is masked");
  Tensor out(z.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i)
    if (!is_masked(mask[i])) total += (out[i] = std::exp(z[i] - top));
  for (auto& v : out.values()) v /= total;
  const auto iz = logits.id();
  return logits.tape()->record(std::move(out), {logits}, [iz](Tape& t, std::size_t self) {
    if (!t.needs_grad(iz)) return;
    const auto y = t.value(self).values();
    const auto g = t.grad_buffer(self).values();
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
    auto gz = t.grad_buffer(iz).values();
    for (std::size_t i = 0; i < y.size(); ++i) gz[i] += y[i] * (g[i] - dot);
  });
}

}  // namespace req2lib
