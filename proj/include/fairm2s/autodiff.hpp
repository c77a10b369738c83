#pragma once
// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every value on a tape is a 2-D Eigen matrix (scalars are 1x1, vectors are
// n x 1 or 1 x n). Nodes are appended in evaluation order, so the tape is
// topologically sorted by construction and backward() is a single reverse
// sweep. A tape can be swept from several roots; sweeping never mutates it.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fairm2s/errors.hpp"

namespace fairm2s {

#ifdef FAIRM2S_DOUBLE
using real = double;
#else
using real = float;
#endif

template <typename Scalar>
using Tensor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
};

/// Result of a backward sweep: one gradient slot per tape node.
template <typename Scalar>
class Gradients {
 public:
  using tensor_type = Tensor<Scalar>;

  Gradients(const Tape<Scalar>* tape, std::vector<tensor_type> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient of the root w.r.t. `v`; exactly zero if `v` does not reach the root.
  tensor_type operator[](Var<Scalar> v) const {
    const auto& g = grads_.at(static_cast<std::size_t>(v.id));
    if (g.size() == 0) {
      const auto& val = tape_->value(v);
      return tensor_type::Zero(val.rows(), val.cols());
    }
    return g;
  }

 private:
  const Tape<Scalar>* tape_;
  std::vector<tensor_type> grads_;
};

template <typename Scalar>
class Tape {
 public:
  using tensor_type = Tensor<Scalar>;
  using var_type = Var<Scalar>;
  // Receives the upstream gradient of the node and accumulates into inputs.
  using backward_fn = std::function<void(const tensor_type& upstream, std::vector<tensor_type>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameter).
  var_type leaf(tensor_type value) { return push(std::move(value), true, {}, "leaf"); }

  /// Non-differentiable input.
  var_type constant(tensor_type value) { return push(std::move(value), false, {}, "constant"); }

  var_type constant(Scalar value) { return constant(tensor_type::Constant(1, 1, value)); }

  const tensor_type& value(var_type v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(var_type v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op result. `inputs` are used only to decide whether the node
  /// needs a gradient; `fn` is skipped entirely when none of them do.
  var_type record(tensor_type value, std::initializer_list<var_type> inputs, backward_fn fn, const char* op) {
    bool rg = false;
    for (auto in : inputs) {
      check_owner(in, op);
      rg = rg || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : backward_fn{}, op);
  }

  Gradients<Scalar> backward(var_type root) const {
    check_owner(root, "backward");
    const auto& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
      std::ostringstream os;
      os << "backward: root must be scalar, got " << rv.rows() << "x" << rv.cols();
      throw ShapeError(os.str());
    }
    std::vector<tensor_type> grads(nodes_.size());
    grads[static_cast<std::size_t>(root.id)] = tensor_type::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      const auto& node = nodes_[static_cast<std::size_t>(i)];
      auto& g = grads[static_cast<std::size_t>(i)];
      if (g.size() == 0 || !node.backward) continue;
      node.backward(g, grads);
    }
    return Gradients<Scalar>(this, std::move(grads));
  }

  /// grads[id] += delta, allocating on first touch.
  template <typename Expr>
  static void accumulate(std::vector<tensor_type>& grads, int id, const Expr& delta) {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.size() == 0) {
      g = delta;
    } else {
      g += delta;
    }
  }

 private:
  struct Node {
    tensor_type value;
    bool requires_grad;
    backward_fn backward;
  };

  var_type push(tensor_type value, bool requires_grad, backward_fn fn, const char* op) {
    if (!value.allFinite()) {
      throw NumericError(std::string("non-finite result in ") + op);
    }
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn)});
    return var_type{this, static_cast<int>(nodes_.size()) - 1};
  }

  void check_owner(var_type v, const char* op) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw std::invalid_argument(std::string(op) + ": variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << op << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x" << b.cols();
    throw ShapeError(os.str());
  }
}

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise ops

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "add");
  auto& t = detail::same_tape(a, b, "add");
  using T = Tape<Scalar>;
  return t.record(a.value() + b.value(), {a, b},
                  [a, b](const auto& up, auto& grads) {
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, up);
                    if (b.tape->requires_grad(b)) T::accumulate(grads, b.id, up);
                  },
                  "add");
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "sub");
  auto& t = detail::same_tape(a, b, "sub");
  using T = Tape<Scalar>;
  return t.record(a.value() - b.value(), {a, b},
                  [a, b](const auto& up, auto& grads) {
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, up);
                    if (b.tape->requires_grad(b)) T::accumulate(grads, b.id, -up);
                  },
                  "sub");
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "mul");
  auto& t = detail::same_tape(a, b, "mul");
  using T = Tape<Scalar>;
  return t.record(a.value().cwiseProduct(b.value()), {a, b},
                  [a, b](const auto& up, auto& grads) {
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, up.cwiseProduct(b.value()));
                    if (b.tape->requires_grad(b)) T::accumulate(grads, b.id, up.cwiseProduct(a.value()));
                  },
                  "mul");
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.rows()) {
    std::ostringstream os;
    os << "matmul: inner dimensions differ " << a.rows() << "x" << a.cols() << " * " << b.rows() << "x" << b.cols();
    throw ShapeError(os.str());
  }
  auto& t = detail::same_tape(a, b, "matmul");
  using T = Tape<Scalar>;
  Tensor<Scalar> out = a.value() * b.value();
  return t.record(std::move(out), {a, b},
                  [a, b](const auto& up, auto& grads) {
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, up * b.value().transpose());
                    if (b.tape->requires_grad(b)) T::accumulate(grads, b.id, a.value().transpose() * up);
                  },
                  "matmul");
}

/// Adds a 1 x n row to every row of an m x n matrix (bias broadcast).
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    std::ostringstream os;
    os << "add_row: expected 1x" << a.cols() << " row, got " << row.rows() << "x" << row.cols();
    throw ShapeError(os.str());
  }
  auto& t = detail::same_tape(a, row, "add_row");
  using T = Tape<Scalar>;
  Tensor<Scalar> out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row},
                  [a, row](const auto& up, auto& grads) {
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, up);
                    if (row.tape->requires_grad(row)) T::accumulate(grads, row.id, up.colwise().sum());
                  },
                  "add_row");
}

/// Sum of elementwise products, as a 1x1 result.
template <typename Scalar>
Var<Scalar> dot(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "dot");
  auto& t = detail::same_tape(a, b, "dot");
  using T = Tape<Scalar>;
  Tensor<Scalar> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return t.record(std::move(out), {a, b},
                  [a, b](const auto& up, auto& grads) {
                    const Scalar s = up(0, 0);
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, s * b.value());
                    if (b.tape->requires_grad(b)) T::accumulate(grads, b.id, s * a.value());
                  },
                  "dot");
}

/// Column-wise concatenation [a | b]; both must have the same row count.
template <typename Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
  auto& t = detail::same_tape(a, b, "concat_cols");
  using T = Tape<Scalar>;
  Tensor<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const auto ac = a.cols();
  const auto bc = b.cols();
  return t.record(std::move(out), {a, b},
                  [a, b, ac, bc](const auto& up, auto& grads) {
                    if (a.tape->requires_grad(a)) T::accumulate(grads, a.id, up.leftCols(ac));
                    if (b.tape->requires_grad(b)) T::accumulate(grads, b.id, up.rightCols(bc));
                  },
                  "concat_cols");
}

// ---------------------------------------------------------------------------
// Unary ops

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  using T = Tape<Scalar>;
  Tensor<Scalar> out = a.value().unaryExpr([](Scalar x) {
    // Two branches keep exp() from overflowing for large |x|.
    if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
  });
  auto& t = *a.tape;
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a},
                  [a, self](const auto& up, auto& grads) {
                    const auto& y = a.tape->value(Var<Scalar>{a.tape, self});
                    T::accumulate(grads, a.id, up.cwiseProduct(y.cwiseProduct((Scalar(1) - y.array()).matrix())));
                  },
                  "sigmoid");
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  using T = Tape<Scalar>;
  Tensor<Scalar> out = a.value().array().tanh().matrix();
  auto& t = *a.tape;
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a},
                  [a, self](const auto& up, auto& grads) {
                    const auto& y = a.tape->value(Var<Scalar>{a.tape, self});
                    T::accumulate(grads, a.id, (up.array() * (Scalar(1) - y.array().square())).matrix());
                  },
                  "tanh");
}

/// Natural log; requires strictly positive input.
template <typename Scalar>
Var<Scalar> log(Var<Scalar> a) {
  using T = Tape<Scalar>;
  if ((a.value().array() <= Scalar(0)).any()) throw NumericError("log: non-positive input");
  return a.tape->record(a.value().array().log().matrix(), {a},
                        [a](const auto& up, auto& grads) {
                          T::accumulate(grads, a.id, (up.array() / a.value().array()).matrix());
                        },
                        "log");
}

/// |a| with subgradient 0 at 0.
template <typename Scalar>
Var<Scalar> abs(Var<Scalar> a) {
  using T = Tape<Scalar>;
  return a.tape->record(a.value().cwiseAbs(), {a},
                        [a](const auto& up, auto& grads) {
                          Tensor<Scalar> sgn = a.value().unaryExpr([](Scalar x) {
                            return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
                          });
                          T::accumulate(grads, a.id, up.cwiseProduct(sgn));
                        },
                        "abs");
}

/// max(a, c) elementwise; gradient passes only where a > c.
template <typename Scalar>
Var<Scalar> max_with(Var<Scalar> a, Scalar c) {
  using T = Tape<Scalar>;
  return a.tape->record(a.value().cwiseMax(c), {a},
                        [a, c](const auto& up, auto& grads) {
                          Tensor<Scalar> pass = (a.value().array() > c).template cast<Scalar>().matrix();
                          T::accumulate(grads, a.id, up.cwiseProduct(pass));
                        },
                        "max_with");
}

/// Clamp into [lo, hi]; gradient is zero where the clamp is active.
template <typename Scalar>
Var<Scalar> clamp(Var<Scalar> a, Scalar lo, Scalar hi) {
  using T = Tape<Scalar>;
  Tensor<Scalar> out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->record(std::move(out), {a},
                        [a, lo, hi](const auto& up, auto& grads) {
                          Tensor<Scalar> pass =
                              ((a.value().array() >= lo) && (a.value().array() <= hi)).template cast<Scalar>().matrix();
                          T::accumulate(grads, a.id, up.cwiseProduct(pass));
                        },
                        "clamp");
}

/// c * a
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar c) {
  using T = Tape<Scalar>;
  return a.tape->record(c * a.value(), {a},
                        [a, c](const auto& up, auto& grads) { T::accumulate(grads, a.id, c * up); }, "scale");
}

/// a + c elementwise
template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Scalar c) {
  using T = Tape<Scalar>;
  Tensor<Scalar> out = (a.value().array() + c).matrix();
  return a.tape->record(std::move(out), {a},
                        [a](const auto& up, auto& grads) { T::accumulate(grads, a.id, up); }, "add_scalar");
}

template <typename Scalar>
Var<Scalar> operator*(Scalar c, Var<Scalar> a) {
  return scale(a, c);
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a) {
  return scale(a, Scalar(-1));
}

/// Columns [start, start + n).
template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 1 || start + n > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  const auto rows = a.rows();
  const auto cols = a.cols();
  return a.tape->record(a.value().middleCols(start, n), {a},
                        [a, start, n, rows, cols](const auto& up, auto& grads) {
                          Tensor<Scalar> g = Tensor<Scalar>::Zero(rows, cols);
                          g.middleCols(start, n) = up;
                          Tape<Scalar>::accumulate(grads, a.id, g);
                        },
                        "slice_cols");
}

/// Rows [start, start + n); with time on the row axis this is a time slice.
template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 1 || start + n > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  const auto rows = a.rows();
  const auto cols = a.cols();
  return a.tape->record(a.value().middleRows(start, n), {a},
                        [a, start, n, rows, cols](const auto& up, auto& grads) {
                          Tensor<Scalar> g = Tensor<Scalar>::Zero(rows, cols);
                          g.middleRows(start, n) = up;
                          Tape<Scalar>::accumulate(grads, a.id, g);
                        },
                        "slice_rows");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tensor<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const auto rows = a.rows();
  const auto cols = a.cols();
  return a.tape->record(std::move(out), {a},
                        [a, rows, cols](const auto& up, auto& grads) {
                          Tape<Scalar>::accumulate(grads, a.id, Tensor<Scalar>::Constant(rows, cols, up(0, 0)));
                        },
                        "sum");
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Mean over axis 0 (rows): m x n -> 1 x n.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  const auto rows = a.rows();
  Tensor<Scalar> out = a.value().colwise().sum() / static_cast<Scalar>(rows);
  return a.tape->record(std::move(out), {a},
                        [a, rows](const auto& up, auto& grads) {
                          Tensor<Scalar> g = up.replicate(rows, 1) / static_cast<Scalar>(rows);
                          Tape<Scalar>::accumulate(grads, a.id, g);
                        },
                        "mean_rows");
}

/// Mean over axis 1 (columns): m x n -> m x 1.
template <typename Scalar>
Var<Scalar> mean_cols(Var<Scalar> a) {
  const auto cols = a.cols();
  Tensor<Scalar> out = a.value().rowwise().sum() / static_cast<Scalar>(cols);
  return a.tape->record(std::move(out), {a},
                        [a, cols](const auto& up, auto& grads) {
                          Tensor<Scalar> g = up.replicate(1, cols) / static_cast<Scalar>(cols);
                          Tape<Scalar>::accumulate(grads, a.id, g);
                        },
                        "mean_cols");
}

}  // namespace fairm2s
