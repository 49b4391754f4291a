#pragma once

#include "diffgp/autodiff.hpp"
#include "diffgp/linalg.hpp"

#include <optional>

namespace diffgp {

/// RBF-ARD hyperparameters, stored in log space so the exponentiated values
/// stay strictly positive under unconstrained optimization.
struct KernelParams {
  Matrix log_lengthscales;     ///< 1×D
  Matrix log_signal_variance;  ///< 1×1

  static KernelParams make(Eigen::Index dims, double lengthscale, double variance);

  Eigen::Index dims() const { return log_lengthscales.cols(); }
  double signal_variance() const;
  RowVector lengthscales() const;
};

/// Separable K((x,t),(x',t')) = K(x,x')·k(t,t'). No temporal part means a
/// time-independent field.
struct SpatioTemporalKernel {
  KernelParams spatial;
  std::optional<KernelParams> temporal;

  bool has_temporal() const { return temporal.has_value(); }
};

/// σ²·exp(−½ Σ_d ((x_d−x'_d)/ℓ_d)²)
double rbf_ard(const RowVector& x, const RowVector& xp, const KernelParams& p);

/// Entrywise rbf_ard between the rows of `x` (N×D) and `xp` (M×D).
Matrix kernel_matrix(const Matrix& x, const Matrix& xp, const KernelParams& p);

/// Kernel hyperparameters as graph variables.
struct KernelVars {
  ad::Var log_lengthscales;
  ad::Var log_signal_variance;

  static KernelVars bind(const KernelParams& p, ad::Binder& binder);
  static KernelVars constant(const KernelParams& p);
};

/// Differentiable kernel matrix; gradients flow to both inputs and to the
/// log-hyperparameters. Passing the same variable twice (K_ZZ) is fine.
ad::Var kernel_matrix(const ad::Var& x, const ad::Var& xp, const KernelVars& p);

/// Blocks of the matrix-valued field kernel K(x,x') = k(x,x')·I_D. Only the
/// scalar matrices are stored; the MD×MD system is I_D ⊗ K_ZZ.
struct FieldKernelBlocks {
  Matrix cross;     ///< K_XZ, N×M
  Matrix inducing;  ///< K_ZZ, M×M
  Eigen::Index outputs = 1;

  /// I_D ⊗ K_ZZ, ordered to match vec(U) with U of shape M×D.
  Matrix materialized_inducing() const;
  /// I_D ⊗ K_XZ; row d·N+i holds output d of point i.
  Matrix materialized_cross() const;
};

FieldKernelBlocks field_kernel_blocks(const Matrix& x, const Matrix& z, const KernelParams& p,
                                      Eigen::Index outputs);

/// C_xZ = K_{X Zs} ⊗_row k(t, Zt): N × (Ms·Mt), column s·Mt + τ.
Matrix st_kernel_cross(const Matrix& x, double t, const Matrix& zs, const Matrix& zt,
                       const SpatioTemporalKernel& k);

/// C_ZZ = K_{Zs Zs} ⊗ K_{Zt Zt}.
Matrix st_kernel_inducing(const Matrix& zs, const Matrix& zt, const SpatioTemporalKernel& k);

ad::Var st_kernel_cross(const ad::Var& x, double t, const ad::Var& zs, const ad::Var& zt,
                        const KernelVars& spatial, const KernelVars& temporal);

}  // namespace diffgp
