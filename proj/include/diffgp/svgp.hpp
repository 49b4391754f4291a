#pragma once

#include "diffgp/autodiff.hpp"
#include "diffgp/kernels.hpp"
#include "diffgp/linalg.hpp"

#include <vector>

namespace diffgp {

/// q(u) = Π_k N(u_k | m_k, S_k) with S_k = L_k L_kᵀ. Each L_k is stored as an
/// unconstrained matrix whose strict lower triangle is used as-is and whose
/// diagonal holds log L_ii.
///
/// When `whitened` is set the stored pair (v, V) lives in the coordinates of
/// chol(K_ZZ) = L_K: u = L_K v, m = L_K v and L = L_K V.
struct VariationalGaussian {
  Matrix mean;                   ///< M×K
  std::vector<Matrix> chol_raw;  ///< K matrices, M×M
  bool whitened = false;

  Eigen::Index size() const { return mean.rows(); }
  Eigen::Index outputs() const { return mean.cols(); }
  Matrix factor(Eigen::Index k) const;
  Matrix covariance(Eigen::Index k) const;

  /// Builds the raw parameterization from explicit lower factors.
  static VariationalGaussian from_factors(Matrix mean, const std::vector<Matrix>& lower);
  /// m = 0, L_k = factor_scale·chol(K_ZZ) for every output.
  static VariationalGaussian prior_scaled(const Matrix& kzz, Eigen::Index outputs,
                                          double factor_scale,
                                          const JitterPolicy& policy = {});
  /// m = 0, V = factor_scale·I, whitened.
  static VariationalGaussian whitened_prior(Eigen::Index size, Eigen::Index outputs,
                                            double factor_scale);

  /// The same distribution over u, unwhitened against the given L_K.
  VariationalGaussian unwhiten(const Matrix& kzz_chol) const;
};

struct GaussianVars {
  ad::Var mean;
  std::vector<ad::Var> chol_raw;
  bool whitened = false;

  static GaussianVars bind(const VariationalGaussian& q, ad::Binder& binder);
  static GaussianVars constant(const VariationalGaussian& q);
};

enum class LikelihoodKind { Gaussian, Bernoulli };

struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::Gaussian;
  Matrix log_noise_variance = Matrix::Constant(1, 1, 0.0);  ///< Gaussian only
  int n_quad = 20;                                          ///< Bernoulli only

  static Likelihood gaussian(double noise_variance);
  static Likelihood bernoulli(int n_quad = 20);
  double noise_variance() const;
};

/// The predictor g: inducing locations, q(u_g), RBF-ARD kernel and likelihood.
struct PredictorGP {
  Matrix inducing;  ///< Z_g, M×D
  VariationalGaussian q;
  KernelParams kernel;
  Likelihood likelihood;

  Eigen::Index dims() const { return inducing.cols(); }
};

/// q(u) in whitened form against chol(K_ZZ), reusable across many query
/// batches within one parameter snapshot.
struct InducingPosterior {
  ad::Var chol;           ///< L_K, L_K L_Kᵀ = K_ZZ + εI
  ad::Var chol_inv;       ///< L_K⁻¹
  ad::Var proj_mean;      ///< L_K⁻¹ m, M×K
  ad::Var quad;           ///< [V_k V_kᵀ − I]_k with V_k = L_K⁻¹ L_k, M×(M·K)
  std::vector<ad::Var> whitened_factors;
  bool whitened = false;  ///< q was given in whitened coordinates
  double jitter = 0.0;
};

InducingPosterior prepare_posterior(const ad::Var& kzz, const GaussianVars& q,
                                    const JitterPolicy& policy = {});

/// As above from a precomputed factor and its inverse (e.g. Kronecker-structured).
InducingPosterior prepare_posterior_factored(const ad::Var& chol, const ad::Var& chol_inv,
                                             const GaussianVars& q);

struct MarginalVars {
  ad::Var mean;  ///< N×K
  ad::Var var;   ///< N×K, clamped at 1e-12
};

/// mean = Q m, var_ik = prior_diag_i + [Q(S_k − K_ZZ)Qᵀ]_ii with Q = K_XZ K_ZZ⁻¹.
/// `prior_diag` is 1×1 (stationary kernel) or N×1.
MarginalVars posterior_marginal(const InducingPosterior& post, const ad::Var& kxz,
                                const ad::Var& prior_diag);

/// Same marginals from the whitened cross term B = K_XZ L_K^{-T}.
MarginalVars whitened_marginal(const InducingPosterior& post, const ad::Var& whitened_cross,
                               const ad::Var& prior_diag);

/// Σ_k KL[N(m_k, S_k) ‖ N(0, K_ZZ)].
ad::Var kl_divergence(const InducingPosterior& post, const GaussianVars& q);

inline constexpr double kVarianceFloor = 1e-12;

// ---- value-level operations ----

struct Conditional {
  Vector mean;
  Matrix cov;
};

/// f | u at query points: mean Q u, covariance K_XX − Q K_ZZ Qᵀ.
Conditional sparse_conditional(const Matrix& xq, const Matrix& z, const KernelParams& kernel,
                               const Vector& u);

struct Marginal {
  Matrix mean;  ///< N×K
  Matrix var;   ///< N×K
};

Marginal variational_marginal(const Matrix& xq, const Matrix& z, const KernelParams& kernel,
                              const VariationalGaussian& q);

double kl_gaussian(const VariationalGaussian& q, const Matrix& kzz);

/// Per point log N(y | mean, σ_n²) − var/(2σ_n²).
Vector expected_gaussian_loglik(const Vector& y, const Vector& mean, const Vector& var,
                                double noise_variance);
ad::Var expected_gaussian_loglik(const Vector& y, const ad::Var& mean, const ad::Var& var,
                                 const ad::Var& log_noise_variance);

/// Gauss–Hermite rule for ∫ e^{−ξ²} f(ξ) dξ; weights sum to √π.
struct GaussHermite {
  Vector nodes;
  Vector weights;

  static GaussHermite rule(int n);
};

/// Per point Σ_k w_k log Φ(y·(mean + √(2 var) ξ_k)) / √π, labels y ∈ {−1, +1}.
Vector expected_bernoulli_loglik(const Vector& y, const Vector& mean, const Vector& var,
                                 int n_quad = 20);
ad::Var expected_bernoulli_loglik(const Vector& y, const ad::Var& mean, const ad::Var& var,
                                  int n_quad = 20);

/// p(y = +1) = E[Φ(g)] under g ~ N(mean, var), by the same quadrature.
Vector bernoulli_predictive(const Vector& mean, const Vector& var, int n_quad = 20);

}  // namespace diffgp
