#include "diffgp/autodiff.hpp"

#include "diffgp/errors.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace diffgp::ad {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Var leaf(Matrix value, bool requires_grad) {
  if (!value.allFinite()) throw NonFiniteValue("leaf: non-finite value");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
  return Var(std::move(n));
}

/// Sums a broadcast gradient back down to the operand's shape.
Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  if (cols == 1) return g.rowwise().sum();
  throw std::logic_error("reduce_to: incompatible shapes");
}

Eigen::Index bdim(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw std::invalid_argument(std::string(op) + ": shapes not broadcastable");
}

Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1) return m.replicate(rows, 1);
  return m.replicate(1, cols);
}

// φ(z)/Φ(z) and log Φ(z), stable across the real line.
double mills_ratio_inv(double z) {
  if (z > -37.0) {
    const double cdf = 0.5 * std::erfc(-z * kInvSqrt2);
    return kInvSqrt2Pi * std::exp(-0.5 * z * z) / cdf;
  }
  const double z2 = z * z;
  return -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2));
}

double log_ndtr(double z) {
  if (z > 0.0) return std::log1p(-0.5 * std::erfc(z * kInvSqrt2));
  if (z > -37.0) return std::log(0.5 * std::erfc(-z * kInvSqrt2));
  const double z2 = z * z;
  return -0.5 * z2 - std::log(-z) - 0.5 * std::log(2.0 * std::numbers::pi) +
         std::log(1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2));
}

}  // namespace

// ---------------------------------------------------------------- core

Var Var::constant(Matrix value) { return leaf(std::move(value), false); }
Var Var::constant(double value) { return leaf(Matrix::Constant(1, 1, value), false); }
Var Var::parameter(Matrix value) { return leaf(std::move(value), true); }

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::invalid_argument("Var::item: not a scalar");
  return node_->value(0, 0);
}

void accumulate(const NodePtr& parent, const Matrix& g) {
  if (!parent->requires_grad) return;
  if (parent->grad.size() == 0) {
    parent->grad = g;
  } else {
    parent->grad += g;
  }
}

Var make_op(const char* name, Matrix value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.allFinite()) throw NonFiniteValue(std::string(name) + ": non-finite result");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = name;
  n->is_leaf = false;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS over differentiable nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node* root = loss.node().get();
  if (root->grad.size() == 0) {
    root->grad = Matrix::Ones(1, 1);
  } else {
    root->grad.array() += 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->is_leaf) {
      if (!node->grad.allFinite()) throw NonFiniteGradient("backward: non-finite parameter gradient");
      continue;
    }
    if (node->grad.size() == 0) continue;
    if (!node->backward) {
      throw UnsupportedPrimitive(std::string("backward: no rule for op ") + node->op);
    }
    node->backward(node->grad, node->parents);
    node->grad.resize(0, 0);
  }
}

Var Binder::bind(const Matrix& value) {
  Var v = trainable_ ? Var::parameter(value) : Var::constant(value);
  if (trainable_) leaves_.push_back(v);
  return v;
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  const auto r = bdim(a.rows(), b.rows(), "add");
  const auto c = bdim(a.cols(), b.cols(), "add");
  Matrix out = expand(a.value(), r, c) + expand(b.value(), r, c);
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_op("add", std::move(out), {a, b},
                 [=](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], reduce_to(g, ar, ac));
                   accumulate(p[1], reduce_to(g, br, bc));
                 });
}

Var sub(const Var& a, const Var& b) {
  const auto r = bdim(a.rows(), b.rows(), "sub");
  const auto c = bdim(a.cols(), b.cols(), "sub");
  Matrix out = expand(a.value(), r, c) - expand(b.value(), r, c);
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_op("sub", std::move(out), {a, b},
                 [=](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], reduce_to(g, ar, ac));
                   if (p[1]->requires_grad) accumulate(p[1], -reduce_to(g, br, bc));
                 });
}

Var mul(const Var& a, const Var& b) {
  const auto r = bdim(a.rows(), b.rows(), "mul");
  const auto c = bdim(a.cols(), b.cols(), "mul");
  Matrix av = expand(a.value(), r, c);
  Matrix bv = expand(b.value(), r, c);
  Matrix out = av.cwiseProduct(bv);
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_op("mul", std::move(out), {a, b},
                 [=, av = std::move(av), bv = std::move(bv)](const Matrix& g,
                                                             std::span<const NodePtr> p) {
                   if (p[0]->requires_grad) accumulate(p[0], reduce_to(g.cwiseProduct(bv), ar, ac));
                   if (p[1]->requires_grad) accumulate(p[1], reduce_to(g.cwiseProduct(av), br, bc));
                 });
}

Var div(const Var& a, const Var& b) {
  const auto r = bdim(a.rows(), b.rows(), "div");
  const auto c = bdim(a.cols(), b.cols(), "div");
  Matrix av = expand(a.value(), r, c);
  Matrix bv = expand(b.value(), r, c);
  Matrix out = av.cwiseQuotient(bv);
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_op("div", out, {a, b},
                 [=, bv = std::move(bv)](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix ga = g.cwiseQuotient(bv);
                   if (p[1]->requires_grad) {
                     accumulate(p[1], reduce_to(-ga.cwiseProduct(out), br, bc));
                   }
                   if (p[0]->requires_grad) accumulate(p[0], reduce_to(ga, ar, ac));
                 });
}

Var scale(const Var& a, double s) {
  return make_op("scale", a.value() * s, {a},
                 [s](const Matrix& g, std::span<const NodePtr> p) { accumulate(p[0], g * s); });
}

Var shift(const Var& a, double s) {
  return make_op("shift", (a.value().array() + s).matrix(), {a},
                 [](const Matrix& g, std::span<const NodePtr> p) { accumulate(p[0], g); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
  Matrix y = a.value().array().exp().matrix();
  return make_op("exp", y, {a}, [y](const Matrix& g, std::span<const NodePtr> p) {
    accumulate(p[0], g.cwiseProduct(y));
  });
}

Var log(const Var& a) {
  Matrix x = a.value();
  return make_op("log", x.array().log().matrix(), {a},
                 [x](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], g.cwiseQuotient(x));
                 });
}

Var sqrt(const Var& a) {
  Matrix y = a.value().array().sqrt().matrix();
  return make_op("sqrt", y, {a}, [y](const Matrix& g, std::span<const NodePtr> p) {
    accumulate(p[0], (0.5 * g.array() / y.array()).matrix());
  });
}

Var square(const Var& a) {
  Matrix x = a.value();
  return make_op("square", x.array().square().matrix(), {a},
                 [x](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], 2.0 * g.cwiseProduct(x));
                 });
}

Var erf(const Var& a) {
  Matrix x = a.value();
  Matrix y = x.unaryExpr([](double v) { return std::erf(v); });
  return make_op("erf", std::move(y), {a}, [x](const Matrix& g, std::span<const NodePtr> p) {
    const double c = 2.0 / std::sqrt(std::numbers::pi);
    accumulate(p[0], (g.array() * c * (-x.array().square()).exp()).matrix());
  });
}

Var normal_cdf(const Var& a) {
  Matrix x = a.value();
  Matrix y = x.unaryExpr([](double v) { return 0.5 * std::erfc(-v * kInvSqrt2); });
  return make_op("normal_cdf", std::move(y), {a},
                 [x](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0],
                              (g.array() * kInvSqrt2Pi * (-0.5 * x.array().square()).exp()).matrix());
                 });
}

Var log_normal_cdf(const Var& a) {
  Matrix x = a.value();
  Matrix y = x.unaryExpr([](double v) { return log_ndtr(v); });
  return make_op("log_normal_cdf", std::move(y), {a},
                 [x](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], g.cwiseProduct(x.unaryExpr([](double v) { return mills_ratio_inv(v); })));
                 });
}

Var clamp_min(const Var& a, double lo) {
  Matrix x = a.value();
  Matrix y = x.cwiseMax(lo);
  return make_op("clamp_min", std::move(y), {a},
                 [x, lo](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], (x.array() >= lo).select(g, 0.0));
                 });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
  const auto r = a.rows(), c = a.cols();
  return make_op("sum", Matrix::Constant(1, 1, a.value().sum()), {a},
                 [r, c](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], Matrix::Constant(r, c, g(0, 0)));
                 });
}

Var row_sum(const Var& a) {
  const auto c = a.cols();
  return make_op("row_sum", a.value().rowwise().sum(), {a},
                 [c](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], g.replicate(1, c));
                 });
}

Var col_sum(const Var& a) {
  const auto r = a.rows();
  return make_op("col_sum", a.value().colwise().sum(), {a},
                 [r](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], g.replicate(r, 1));
                 });
}

Var sum_squares(const Var& a) {
  Matrix x = a.value();
  const double v = x.squaredNorm();
  return make_op("sum_squares", Matrix::Constant(1, 1, v), {a},
                 [x](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], 2.0 * g(0, 0) * x);
                 });
}

Var diag(const Var& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("diag: matrix not square");
  const auto n = a.rows();
  return make_op("diag", a.value().diagonal(), {a},
                 [n](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix d = Matrix::Zero(n, n);
                   d.diagonal() = g.col(0);
                   accumulate(p[0], d);
                 });
}

Var broadcast_to(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  bdim(rows, a.rows(), "broadcast_to");
  bdim(cols, a.cols(), "broadcast_to");
  const auto ar = a.rows(), ac = a.cols();
  return make_op("broadcast_to", expand(a.value(), rows, cols), {a},
                 [ar, ac](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], reduce_to(g, ar, ac));
                 });
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> idx) {
  std::vector<Eigen::Index> rows(idx.begin(), idx.end());
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows: index");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const auto ar = a.rows(), ac = a.cols();
  return make_op("gather_rows", std::move(out), {a},
                 [rows = std::move(rows), ar, ac](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix d = Matrix::Zero(ar, ac);
                   for (std::size_t i = 0; i < rows.size(); ++i) {
                     d.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
                   }
                   accumulate(p[0], d);
                 });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: no inputs");
  const auto r = parts.front().rows();
  Eigen::Index total = 0;
  std::vector<Eigen::Index> widths;
  for (const auto& v : parts) {
    if (v.rows() != r) throw std::invalid_argument("hcat: row mismatch");
    widths.push_back(v.cols());
    total += v.cols();
  }
  Matrix out(r, total);
  Eigen::Index off = 0;
  for (const auto& v : parts) {
    out.middleCols(off, v.cols()) = v.value();
    off += v.cols();
  }
  return make_op("hcat", std::move(out), parts,
                 [widths](const Matrix& g, std::span<const NodePtr> p) {
                   Eigen::Index o = 0;
                   for (std::size_t i = 0; i < p.size(); ++i) {
                     if (p[i]->requires_grad) accumulate(p[i], g.middleCols(o, widths[i]));
                     o += widths[i];
                   }
                 });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: no inputs");
  const auto c = parts.front().cols();
  Eigen::Index total = 0;
  std::vector<Eigen::Index> heights;
  for (const auto& v : parts) {
    if (v.cols() != c) throw std::invalid_argument("vcat: column mismatch");
    heights.push_back(v.rows());
    total += v.rows();
  }
  Matrix out(total, c);
  Eigen::Index off = 0;
  for (const auto& v : parts) {
    out.middleRows(off, v.rows()) = v.value();
    off += v.rows();
  }
  return make_op("vcat", std::move(out), parts,
                 [heights](const Matrix& g, std::span<const NodePtr> p) {
                   Eigen::Index o = 0;
                   for (std::size_t i = 0; i < p.size(); ++i) {
                     if (p[i]->requires_grad) accumulate(p[i], g.middleRows(o, heights[i]));
                     o += heights[i];
                   }
                 });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw std::out_of_range("slice_cols");
  const auto ar = a.rows(), ac = a.cols();
  return make_op("slice_cols", a.value().middleCols(start, n), {a},
                 [=](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix d = Matrix::Zero(ar, ac);
                   d.middleCols(start, n) = g;
                   accumulate(p[0], d);
                 });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw std::out_of_range("slice_rows");
  const auto ar = a.rows(), ac = a.cols();
  return make_op("slice_rows", a.value().middleRows(start, n), {a},
                 [=](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix d = Matrix::Zero(ar, ac);
                   d.middleRows(start, n) = g;
                   accumulate(p[0], d);
                 });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out;
  out.noalias() = a.value() * b.value();
  // Operands are needed only for the other side's gradient.
  Matrix av = b.requires_grad() ? a.value() : Matrix();
  Matrix bv = a.requires_grad() ? b.value() : Matrix();
  return make_op("matmul", std::move(out), {a, b},
                 [av = std::move(av), bv = std::move(bv)](const Matrix& g,
                                                          std::span<const NodePtr> p) {
                   if (p[0]->requires_grad) {
                     Matrix ga;
                     ga.noalias() = g * bv.transpose();
                     accumulate(p[0], ga);
                   }
                   if (p[1]->requires_grad) {
                     Matrix gb;
                     gb.noalias() = av.transpose() * g;
                     accumulate(p[1], gb);
                   }
                 });
}

Var transpose(const Var& a) {
  return make_op("transpose", a.value().transpose(), {a},
                 [](const Matrix& g, std::span<const NodePtr> p) {
                   accumulate(p[0], g.transpose());
                 });
}

Var cholesky(const Var& a, const JitterPolicy& policy, double* jitter_out) {
  Matrix sym = 0.5 * (a.value() + a.value().transpose());
  CholeskyFactor f = cholesky_psd(sym, policy);
  if (jitter_out) *jitter_out = f.jitter;
  const double rel = f.relative;
  Matrix l = f.lower;
  return make_op("cholesky", std::move(f.lower), {a},
                 [l, rel](const Matrix& g, std::span<const NodePtr> p) {
                   const auto n = l.rows();
                   Matrix lbar = g.triangularView<Eigen::Lower>();
                   Matrix phi = l.transpose() * lbar;
                   phi.triangularView<Eigen::StrictlyUpper>().setZero();
                   phi.diagonal() *= 0.5;
                   const auto upper = l.transpose().triangularView<Eigen::Upper>();
                   // S = L^{-T} Φ L^{-1}
                   Matrix s = upper.solve(phi);
                   s = upper.solve(Matrix(s.transpose())).transpose();
                   Matrix abar = 0.5 * (s + s.transpose());
                   if (rel != 0.0) {
                     abar.diagonal().array() += rel * abar.trace() / static_cast<double>(n);
                   }
                   accumulate(p[0], abar);
                 });
}

Var solve_triangular(const Var& lower, const Var& b, Transpose trans) {
  Matrix x = diffgp::solve_triangular(lower.value(), b.value(), Side::Left, trans);
  Matrix l = lower.value();
  return make_op("solve_triangular", x, {lower, b},
                 [l, x, trans](const Matrix& g, std::span<const NodePtr> p) {
                   const Transpose back = trans == Transpose::No ? Transpose::Yes : Transpose::No;
                   Matrix bbar = diffgp::solve_triangular(l, g, Side::Left, back);
                   if (p[0]->requires_grad) {
                     Matrix lbar = trans == Transpose::No ? Matrix(-bbar * x.transpose())
                                                          : Matrix(-x * bbar.transpose());
                     accumulate(p[0], Matrix(lbar.triangularView<Eigen::Lower>()));
                   }
                   accumulate(p[1], bbar);
                 });
}

Var kron(const Var& a, const Var& b) {
  Matrix av = a.value(), bv = b.value();
  return make_op("kron", diffgp::kron(av, bv), {a, b},
                 [av, bv](const Matrix& g, std::span<const NodePtr> p) {
                   const auto pr = bv.rows(), pc = bv.cols();
                   Matrix ga = Matrix::Zero(av.rows(), av.cols());
                   Matrix gb = Matrix::Zero(pr, pc);
                   for (Eigen::Index i = 0; i < av.rows(); ++i) {
                     for (Eigen::Index j = 0; j < av.cols(); ++j) {
                       auto blk = g.block(i * pr, j * pc, pr, pc);
                       ga(i, j) = blk.cwiseProduct(bv).sum();
                       gb += av(i, j) * blk;
                     }
                   }
                   accumulate(p[0], ga);
                   accumulate(p[1], gb);
                 });
}

Var row_kron(const Var& a, const Var& b) {
  Matrix av = a.value(), bv = b.value();
  return make_op("row_kron", diffgp::row_kron(av, bv), {a, b},
                 [av, bv](const Matrix& g, std::span<const NodePtr> p) {
                   const auto q = bv.cols();
                   Matrix ga = Matrix::Zero(av.rows(), av.cols());
                   Matrix gb = Matrix::Zero(bv.rows(), q);
                   for (Eigen::Index i = 0; i < av.rows(); ++i) {
                     const Eigen::Index bi = bv.rows() == 1 ? 0 : i;
                     for (Eigen::Index j = 0; j < av.cols(); ++j) {
                       auto seg = g.row(i).segment(j * q, q);
                       ga(i, j) = seg.dot(bv.row(bi));
                       gb.row(bi) += av(i, j) * seg;
                     }
                   }
                   accumulate(p[0], ga);
                   accumulate(p[1], gb);
                 });
}

Var tril_logdiag(const Var& raw) {
  if (raw.rows() != raw.cols()) throw std::invalid_argument("tril_logdiag: not square");
  Matrix l = raw.value().triangularView<Eigen::StrictlyLower>();
  Vector d = raw.value().diagonal().array().exp();
  l.diagonal() = d;
  return make_op("tril_logdiag", std::move(l), {raw},
                 [d](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix gr = g.triangularView<Eigen::StrictlyLower>();
                   gr.diagonal() = g.diagonal().cwiseProduct(d);
                   accumulate(p[0], gr);
                 });
}

Var gram(const Var& a) {
  Matrix av = a.value();
  Matrix out = Matrix::Zero(av.rows(), av.rows());
  out.selfadjointView<Eigen::Lower>().rankUpdate(av);
  out.triangularView<Eigen::StrictlyUpper>() = out.transpose();
  return make_op("gram", std::move(out), {a},
                 [av](const Matrix& g, std::span<const NodePtr> p) {
                   Matrix ga;
                   ga.noalias() = (g + g.transpose()) * av;
                   accumulate(p[0], ga);
                 });
}

Var quad_diag(const Var& b, const Var& h) {
  const auto n = b.rows(), m = b.cols();
  if (h.rows() != m || h.cols() % m != 0) throw std::invalid_argument("quad_diag: shape mismatch");
  const auto k = h.cols() / m;
  Matrix bh;
  bh.noalias() = b.value() * h.value();
  Matrix out(n, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    out.col(j) = b.value().cwiseProduct(bh.middleCols(j * m, m)).rowwise().sum();
  }
  Matrix bv = b.value();
  return make_op("quad_diag", std::move(out), {b, h},
                 [bv, bh = std::move(bh), n, m, k](const Matrix& g, std::span<const NodePtr> p) {
                   if (p[0]->requires_grad) {
                     Matrix gb = Matrix::Zero(n, m);
                     for (Eigen::Index j = 0; j < k; ++j) {
                       gb += 2.0 * (bh.middleCols(j * m, m).array().colwise() * g.col(j).array()).matrix();
                     }
                     accumulate(p[0], gb);
                   }
                   if (p[1]->requires_grad) {
                     Matrix scaled(n, m * k);
                     for (Eigen::Index j = 0; j < k; ++j) {
                       scaled.middleCols(j * m, m) = (bv.array().colwise() * g.col(j).array()).matrix();
                     }
                     Matrix gh;
                     gh.noalias() = bv.transpose() * scaled;
                     accumulate(p[1], gh);
                   }
                 });
}

}  // namespace diffgp::ad
