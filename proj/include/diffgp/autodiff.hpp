#pragma once

// Define-by-run reverse-mode differentiation over dense matrices.
//
// A graph is built while the forward computation runs; `backward(loss)` walks
// it once in reverse topological order. Nodes whose inputs are all constants
// drop their parents immediately, so evaluation-only graphs do not retain
// intermediate values.

#include "diffgp/linalg.hpp"

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

namespace diffgp::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Accumulates the contribution of one node to its parents' gradients.
using BackwardFn = std::function<void(const Matrix& grad_out, std::span<const NodePtr> parents)>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Matrix value);
  static Var constant(double value);
  static Var parameter(Matrix value);

  const Matrix& value() const { return node_->value; }
  /// Gradient after backward(); zeros of the value's shape if none reached it.
  Matrix grad() const;
  double item() const;

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Adds `g` into a parent's gradient buffer if that parent is differentiable.
void accumulate(const NodePtr& parent, const Matrix& g);

/// Builds an interior node. Throws NonFiniteValue if `value` holds NaN/Inf.
Var make_op(const char* name, Matrix value, std::vector<Var> parents, BackwardFn backward);

/// Reverse pass from a 1×1 loss. Throws NonFiniteGradient if any parameter
/// gradient is non-finite and UnsupportedPrimitive if a differentiable interior
/// node has no backward rule.
void backward(const Var& loss);

/// Hands out leaf variables for a set of parameter matrices and remembers the
/// pairing so gradients can be read back after the reverse pass.
class Binder {
 public:
  explicit Binder(bool trainable = true) : trainable_(trainable) {}

  Var bind(const Matrix& value);
  Var fixed(const Matrix& value) const { return Var::constant(value); }
  void set_trainable(bool t) { trainable_ = t; }

  const std::vector<Var>& leaves() const { return leaves_; }

 private:
  bool trainable_;
  std::vector<Var> leaves_;
};

// ---- elementwise with 2-D broadcasting (each dim equal or 1) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var shift(const Var& a, double s);
Var neg(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var erf(const Var& a);
Var normal_cdf(const Var& a);
Var log_normal_cdf(const Var& a);
/// max(a, lo); the gradient is zero where the clamp is active.
Var clamp_min(const Var& a, double lo);

// ---- reductions, reshaping ----
Var sum(const Var& a);
Var row_sum(const Var& a);
Var col_sum(const Var& a);
Var sum_squares(const Var& a);
Var diag(const Var& a);
Var broadcast_to(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var gather_rows(const Var& a, std::span<const Eigen::Index> idx);
Var hcat(const std::vector<Var>& parts);
Var vcat(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Cholesky factor of ½(A+Aᵀ) with the jitter ladder; the absolute epsilon is
/// written to `jitter_out` when given.
Var cholesky(const Var& a, const JitterPolicy& policy = {}, double* jitter_out = nullptr);
/// X with op(L) X = B, L lower triangular.
Var solve_triangular(const Var& lower, const Var& b, Transpose trans = Transpose::No);
Var kron(const Var& a, const Var& b);
Var row_kron(const Var& a, const Var& b);
/// tril(raw, -1) + diag(exp(diag(raw))).
Var tril_logdiag(const Var& raw);
/// A Aᵀ, exactly symmetric.
Var gram(const Var& a);
/// out(i,k) = b_iᵀ H_k b_i for B (N×M) and H = [H_1 … H_K] (M × M·K) with
/// symmetric blocks.
Var quad_diag(const Var& b, const Var& h);

}  // namespace diffgp::ad
