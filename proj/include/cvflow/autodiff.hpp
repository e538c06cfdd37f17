#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation applied to Values created from it. Values
// are lightweight handles (tape pointer + node index); the tape owns the data
// and gradient buffers. Parameters live outside any tape so that models can
// be evaluated on a fresh tape per step while gradients accumulate into the
// persistent parameter storage.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cvflow {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << '(' << m.rows() << 'x' << m.cols() << ')';
  return os.str();
}

inline Matrix row_matrix(std::initializer_list<double> values) {
  Matrix m(1, static_cast<Eigen::Index>(values.size()));
  Eigen::Index j = 0;
  for (double v : values) m(0, j++) = v;
  return m;
}

inline Matrix row_matrix(const Vector& v) {
  return Matrix(v.transpose());
}

// Trainable storage that outlives any single tape.
struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

namespace ad {

class Tape;

class Value {
 public:
  Value() = default;

  const Matrix& data() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return data().rows(); }
  Eigen::Index cols() const { return data().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

  // Value of a 1x1 result.
  double item() const;

 private:
  friend class Tape;
  Value(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient of the node being processed.
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value constant(Matrix data) { return push(std::move(data), {}, nullptr, false, nullptr); }

  Value variable(Matrix data) { return push(std::move(data), {}, nullptr, true, nullptr); }

  // Leaf bound to persistent storage; backward() adds into param.grad.
  Value parameter(Parameter& param) {
    Parameter* p = &param;
    return push(param.value, {}, [p](Tape&, const Matrix& g) { p->grad += g; }, true, p);
  }

  Value record(Matrix data, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_[i].requires_grad;
    return push(std::move(data), std::move(inputs), needs ? std::move(fn) : BackwardFn{}, needs, nullptr);
  }

  void backward(const Value& root) {
    if (root.tape() != this) throw std::invalid_argument("backward: root belongs to a different tape");
    const Matrix& r = nodes_[root.id()].data;
    if (r.rows() != 1 || r.cols() != 1) {
      throw ShapeError("backward: root must be scalar, got " + shape_str(r));
    }
    nodes_[root.id()].grad(0, 0) += 1.0;
    for (std::size_t k = root.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.requires_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad.setZero();
  }

  std::size_t size() const { return nodes_.size(); }

  const Matrix& data(std::size_t id) const { return nodes_[id].data; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (n.requires_grad) n.grad.array() += g.array();
  }

 private:
  struct Node {
    Matrix data;
    Matrix grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  Value push(Matrix data, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad, Parameter* param) {
    Node n;
    n.grad = Matrix::Zero(data.rows(), data.cols());
    n.data = std::move(data);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.requires_grad = requires_grad;
    n.param = param;
    nodes_.push_back(std::move(n));
    return Value(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Value::data() const { return tape_->data(id_); }
inline const Matrix& Value::grad() const { return tape_->grad(id_); }
inline bool Value::requires_grad() const { return tape_->requires_grad(id_); }

inline double Value::item() const {
  const Matrix& d = data();
  if (d.rows() != 1 || d.cols() != 1) throw ShapeError("item: expected scalar, got " + shape_str(d));
  return d(0, 0);
}

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": values from different tapes");
  return *a.tape();
}

inline void require_same_shape(const Value& a, const Value& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.data()) + " vs " + shape_str(b.data()));
  }
}

inline void require_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw DomainError(std::string(op) + ": non-finite result");
}

}  // namespace detail

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  std::size_t ia = a.id(), ib = b.id();
  return t.record(a.data() + b.data(), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

inline Value sub(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  std::size_t ia = a.id(), ib = b.id();
  return t.record(a.data() - b.data(), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

// Elementwise product.
inline Value mul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  std::size_t ia = a.id(), ib = b.id();
  return t.record(a.data().cwiseProduct(b.data()), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.data(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.data(ia)));
  });
}

inline Value matmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.data()) + " vs " + shape_str(b.data()));
  }
  std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.data() * b.data();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.data(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.data(ia).transpose() * g);
  });
}

inline Value neg(const Value& a) {
  std::size_t ia = a.id();
  return a.tape()->record(-a.data(), {ia}, [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, -g); });
}

inline Value scale(const Value& a, double k) {
  std::size_t ia = a.id();
  return a.tape()->record(a.data() * k, {ia}, [ia, k](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * k); });
}

inline Value add_scalar(const Value& a, double k) {
  std::size_t ia = a.id();
  Matrix out = a.data().array() + k;
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

inline Value tanh(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().array().tanh();
  std::size_t self = a.tape()->size();
  return a.tape()->record(std::move(out), {ia}, [ia, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.data(self);
    tp.accumulate(ia, g.array() * (1.0 - y.array().square()));
  });
}

inline Value exp(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().array().exp();
  detail::require_finite(out, "exp");
  std::size_t self = a.tape()->size();
  return a.tape()->record(std::move(out), {ia}, [ia, self](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(tp.data(self)));
  });
}

inline Value log(const Value& a) {
  if ((a.data().array() <= 0.0).any()) throw DomainError("log: non-positive input");
  std::size_t ia = a.id();
  Matrix out = a.data().array().log();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseQuotient(tp.data(ia)));
  });
}

inline Value square(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().array().square();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, 2.0 * g.cwiseProduct(tp.data(ia)));
  });
}

inline Value relu(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().cwiseMax(0.0);
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.array() * (tp.data(ia).array() > 0.0).cast<double>());
  });
}

inline Value abs(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().cwiseAbs();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.data(ia);
    Matrix sgn = x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    tp.accumulate(ia, g.cwiseProduct(sgn));
  });
}

// Gradient passes where lo <= x <= hi, zero elsewhere.
inline Value clamp(const Value& a, double lo, double hi) {
  std::size_t ia = a.id();
  Matrix out = a.data().cwiseMax(lo).cwiseMin(hi);
  return a.tape()->record(std::move(out), {ia}, [ia, lo, hi](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.data(ia);
    tp.accumulate(ia, g.array() * ((x.array() >= lo) && (x.array() <= hi)).cast<double>());
  });
}

// log(1 + e^x), evaluated without overflow.
inline Value softplus(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g) {
    Matrix sig = tp.data(ia).unaryExpr([](double x) {
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    tp.accumulate(ia, g.cwiseProduct(sig));
  });
}

// Sum of all entries -> 1x1.
inline Value sum(const Value& a) {
  std::size_t ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.data().sum();
  Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record(std::move(out), {ia}, [ia, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

inline Value mean(const Value& a) {
  const double n = static_cast<double>(a.data().size());
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

// Sum along the last axis: (B x n) -> (B x 1).
inline Value row_sum(const Value& a) {
  std::size_t ia = a.id();
  Matrix out = a.data().rowwise().sum();
  Eigen::Index c = a.cols();
  return a.tape()->record(std::move(out), {ia}, [ia, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.replicate(1, c));
  });
}

// (B x n) + (1 x n) with the row broadcast over the batch.
inline Value add_row(const Value& a, const Value& row) {
  Tape& t = detail::same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: shape mismatch " + shape_str(a.data()) + " vs " + shape_str(row.data()));
  }
  std::size_t ia = a.id(), ir = row.id();
  Matrix out = a.data().rowwise() + row.data().row(0);
  return t.record(std::move(out), {ia, ir}, [ia, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

inline Value concat(const std::vector<Value>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape* t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<std::size_t> ids;
  for (const Value& p : parts) {
    if (p.tape() != t) throw std::invalid_argument("concat: values from different tapes");
    if (p.rows() != rows) {
      throw ShapeError("concat: shape mismatch " + shape_str(parts.front().data()) + " vs " + shape_str(p.data()));
    }
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> widths;
  Eigen::Index off = 0;
  for (const Value& p : parts) {
    out.middleCols(off, p.cols()) = p.data();
    widths.push_back(p.cols());
    off += p.cols();
  }
  return t->record(std::move(out), ids, [ids, widths](Tape& tp, const Matrix& g) {
    Eigen::Index o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      tp.accumulate(ids[k], g.middleCols(o, widths[k]));
      o += widths[k];
    }
  });
}

inline std::vector<Value> split(const Value& a, const std::vector<Eigen::Index>& sizes) {
  Eigen::Index total = 0;
  for (Eigen::Index s : sizes) total += s;
  if (total != a.cols()) {
    std::ostringstream os;
    os << "split: sizes sum to " << total << " but input is " << shape_str(a.data());
    throw ShapeError(os.str());
  }
  std::vector<Value> out;
  std::size_t ia = a.id();
  Eigen::Index off = 0;
  for (Eigen::Index s : sizes) {
    Matrix part = a.data().middleCols(off, s);
    out.push_back(a.tape()->record(std::move(part), {ia}, [ia, off, s](Tape& tp, const Matrix& g) {
      if (!tp.requires_grad(ia)) return;
      Matrix full = Matrix::Zero(tp.data(ia).rows(), tp.data(ia).cols());
      full.middleCols(off, s) = g;
      tp.accumulate(ia, full);
    }));
    off += s;
  }
  return out;
}

// Single column j as (B x 1).
inline Value column(const Value& a, Eigen::Index j) {
  if (j < 0 || j >= a.cols()) throw ShapeError("column: index out of range for " + shape_str(a.data()));
  std::size_t ia = a.id();
  Matrix out = a.data().col(j);
  return a.tape()->record(std::move(out), {ia}, [ia, j](Tape& tp, const Matrix& g) {
    if (!tp.requires_grad(ia)) return;
    Matrix full = Matrix::Zero(tp.data(ia).rows(), tp.data(ia).cols());
    full.col(j) = g;
    tp.accumulate(ia, full);
  });
}

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator-(const Value& a) { return neg(a); }

}  // namespace ad
}  // namespace cvflow
