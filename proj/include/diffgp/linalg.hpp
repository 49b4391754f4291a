#pragma once

#include <Eigen/Dense>

#include <vector>

namespace diffgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Escalation rule for diagonal jitter. Each rung is relative to mean(diag A);
/// the first rung whose factorization succeeds wins.
struct JitterPolicy {
  std::vector<double> ladder{0.0, 1e-10, 1e-8, 1e-6, 1e-4};

  /// Ladder restricted to rungs >= floor (used for inducing-point matrices).
  static JitterPolicy starting_at(double floor);
};

/// Flushes subnormal results and operands to zero on the calling thread while
/// alive; restores the previous mode afterwards. No-op off x86 SSE.
class FlushDenormals {
 public:
  FlushDenormals();
  ~FlushDenormals();
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;    ///< absolute epsilon added to the diagonal
  double relative = 0.0;  ///< rung of the ladder that succeeded
};

/// L Lᵀ = A + εI for the smallest admissible ε. Throws FactorizationFailure
/// when the ladder is exhausted and std::invalid_argument when A is not
/// square or not symmetric to 1e-10 relative.
CholeskyFactor cholesky_psd(const Matrix& a, const JitterPolicy& policy = {});

enum class Side { Left, Right };
enum class Transpose { No, Yes };

/// Solves op(L) X = B (Side::Left) or X op(L) = B (Side::Right) for lower
/// triangular L, op = identity or transpose. Throws SingularDiagonal when a
/// diagonal entry is below 1e-300 in magnitude.
Matrix solve_triangular(const Matrix& lower, const Matrix& b, Side side = Side::Left,
                        Transpose trans = Transpose::No);

/// (A⊗B)[iP+p, jQ+q] = A[i,j]·B[p,q].
Matrix kron(const Matrix& a, const Matrix& b);

/// Row-wise Kronecker (face-splitting) product: row i is kron(a_i, b_i).
/// A single-row `b` is broadcast against every row of `a`.
Matrix row_kron(const Matrix& a, const Matrix& b);

bool all_finite(const Matrix& m);

}  // namespace diffgp
