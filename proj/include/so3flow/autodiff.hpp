#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

namespace so3flow::ad {

/// Dense row-major tensor; rows index the batch, columns the features.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// parameter id -> gradient
using GradientMap = std::map<int, Tensor>;

class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class Tape;

/// Handle to a recorded value on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Scalar value of a 1x1 Var.
  double item() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/**
 * @brief Append-only record of primitive operations (define-by-run).
 *
 * Nodes are appended in evaluation order, so inputs always precede their
 * consumers and a single reverse sweep visits every node once. A tape built
 * with record_gradients = false only evaluates values; it is used for
 * inference.
 */
class Tape {
 public:
  /// Accumulates the gradient contribution of one node into its inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value);
  /// Leaf whose gradient is reported by backward() under `param_id`.
  Var parameter(Tensor value, int param_id);
  /// Leaf that receives a gradient but is not reported as a parameter.
  Var variable(Tensor value);

  /// Records an operation node. `backward` may be empty when no input needs
  /// a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].value; }
  bool needs_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }

  /// Adds `g` to the gradient of `v` (used by backward functions).
  void accumulate(const Var& v, const Tensor& g);

  /// Reverse sweep from a 1x1 loss; returns gradients of every parameter
  /// leaf that the loss depends on (zero tensors for the rest).
  GradientMap backward(const Var& loss);
  /// Gradient of any node after backward(); zero if unreached.
  Tensor grad(const Var& v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    int param_id = -1;
    bool needs_grad = false;
    bool has_grad = false;
  };

  std::vector<Node> nodes_;
  bool record_;
};

// ---- elementwise and broadcasting primitives ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a (B x d) + row (1 x d), row broadcast over the batch.
Var add_row(const Var& a, const Var& row);
/// a (B x d) * col (B x 1), column broadcast over the features.
Var mul_col(const Var& a, const Var& col);
Var square(const Var& a);
Var sqrt(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var relu(const Var& a);
Var atan2(const Var& y, const Var& x);

// ---- linear algebra and shape ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum_cols(const Var& a);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
/// Row-major reshape; element order is preserved.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
/// Each row repeated `times` times consecutively: (B x d) -> (B*times x d).
Var repeat_rows(const Var& a, Eigen::Index times);
Var softmax_rows(const Var& a);
/// log|det| of a square matrix, as a 1x1 Var.
Var logabsdet(const Var& a);

// ---- row-vector geometry ----
Var dot_rows(const Var& a, const Var& b);
Var cross_rows(const Var& a, const Var& b);
/// Euclidean norm of each row; throws DegenerateInput below 1e-12.
Var norm_rows(const Var& a);
Var normalize_rows(const Var& a);

/// Per-row map with an explicit Jacobian. `fn(in, out, jac)` writes `out`
/// (out_cols values) and, when `jac` is non-null, the out_cols x in_cols
/// Jacobian in row-major order.
using RowFn = std::function<void(const double* in, double* out, double* jac)>;
Var rowwise(const Var& a, Eigen::Index out_cols, const RowFn& fn);

/// Per-row 4x4 matrix-vector product: w (B x 16, row-major 4x4) times q (B x 4).
Var batched_matvec4(const Var& w, const Var& q);
/// Per-row log|det| of 4x4 matrices stored as (B x 16); result is B x 1.
Var batched_logabsdet4(const Var& w);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace so3flow::ad
