#include "diffgp/linalg.hpp"

#include "diffgp/errors.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace diffgp {

#if defined(__SSE__)
FlushDenormals::FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
FlushDenormals::~FlushDenormals() { _mm_setcsr(saved_); }
#else
FlushDenormals::FlushDenormals() = default;
FlushDenormals::~FlushDenormals() = default;
#endif

JitterPolicy JitterPolicy::starting_at(double floor) {
  JitterPolicy p;
  std::vector<double> kept;
  for (double r : p.ladder) {
    if (r >= floor) kept.push_back(r);
  }
  if (kept.empty() || kept.front() > floor) kept.insert(kept.begin(), floor);
  p.ladder = std::move(kept);
  return p;
}

CholeskyFactor cholesky_psd(const Matrix& a, const JitterPolicy& policy) {
  if (a.rows() != a.cols()) throw std::invalid_argument("cholesky_psd: matrix not square");
  const Eigen::Index n = a.rows();
  if (n == 0) return {Matrix(0, 0), 0.0, 0.0};
  if (!all_finite(a)) throw NonFiniteValue("cholesky_psd: non-finite input");

  const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw std::invalid_argument("cholesky_psd: matrix not symmetric");
  }
  const double mean_diag = a.diagonal().mean();
  const double base = mean_diag > 0.0 ? mean_diag : scale;

  Matrix work(n, n);
  for (double rung : policy.ladder) {
    const double eps = rung * base;
    work = a;
    work.diagonal().array() += eps;
    Eigen::LLT<Matrix> llt(work);
    if (llt.info() != Eigen::Success) continue;
    Matrix l = llt.matrixL();
    if (!all_finite(l) || (l.diagonal().array() <= 0.0).any()) continue;
    return {std::move(l), eps, rung};
  }
  std::ostringstream msg;
  msg << "cholesky_psd: jitter ladder exhausted (n=" << n << ", mean diag=" << mean_diag << ")";
  throw FactorizationFailure(msg.str());
}

Matrix solve_triangular(const Matrix& lower, const Matrix& b, Side side, Transpose trans) {
  if (lower.rows() != lower.cols()) throw std::invalid_argument("solve_triangular: L not square");
  const Eigen::Index n = lower.rows();
  if ((side == Side::Left && b.rows() != n) || (side == Side::Right && b.cols() != n)) {
    throw std::invalid_argument("solve_triangular: shape mismatch");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(std::abs(lower(i, i)) >= 1e-300)) {
      throw SingularDiagonal("solve_triangular: |L_ii| below 1e-300 at i=" + std::to_string(i));
    }
  }
  const auto tri = lower.triangularView<Eigen::Lower>();
  const auto tri_t = lower.transpose().triangularView<Eigen::Upper>();
  if (side == Side::Left) {
    if (trans == Transpose::No) return tri.solve(b);
    return tri_t.solve(b);
  }
  // X op(L) = B  <=>  op(L)ᵀ Xᵀ = Bᵀ
  const Matrix bt = b.transpose();
  if (trans == Transpose::No) return tri_t.solve(bt).transpose();
  return tri.solve(bt).transpose();
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

Matrix row_kron(const Matrix& a, const Matrix& b) {
  if (b.rows() != a.rows() && b.rows() != 1) {
    throw std::invalid_argument("row_kron: row count mismatch");
  }
  const Eigen::Index q = b.cols();
  Matrix out(a.rows(), a.cols() * q);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Eigen::Index bi = b.rows() == 1 ? 0 : i;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.row(i).segment(j * q, q) = a(i, j) * b.row(bi);
    }
  }
  return out;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace diffgp
