#include "diffgp/svgp.hpp"

#include "diffgp/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace diffgp {

Matrix VariationalGaussian::factor(Eigen::Index k) const {
  const Matrix& raw = chol_raw.at(static_cast<std::size_t>(k));
  Matrix l = raw.triangularView<Eigen::StrictlyLower>();
  l.diagonal() = raw.diagonal().array().exp();
  return l;
}

Matrix VariationalGaussian::covariance(Eigen::Index k) const {
  Matrix l = factor(k);
  return l * l.transpose();
}

VariationalGaussian VariationalGaussian::from_factors(Matrix mean,
                                                      const std::vector<Matrix>& lower) {
  if (static_cast<Eigen::Index>(lower.size()) != mean.cols()) {
    throw std::invalid_argument("from_factors: one factor per output column required");
  }
  VariationalGaussian q;
  q.mean = std::move(mean);
  for (const auto& l : lower) {
    if (l.rows() != q.mean.rows() || l.cols() != q.mean.rows()) {
      throw std::invalid_argument("from_factors: factor shape mismatch");
    }
    if ((l.diagonal().array() <= 0.0).any()) {
      throw std::invalid_argument("from_factors: factor diagonal must be positive");
    }
    Matrix raw = l.triangularView<Eigen::StrictlyLower>();
    raw.diagonal() = l.diagonal().array().log();
    q.chol_raw.push_back(std::move(raw));
  }
  return q;
}

VariationalGaussian VariationalGaussian::prior_scaled(const Matrix& kzz, Eigen::Index outputs,
                                                      double factor_scale,
                                                      const JitterPolicy& policy) {
  Matrix l = factor_scale * cholesky_psd(kzz, policy).lower;
  return from_factors(Matrix::Zero(kzz.rows(), outputs),
                      std::vector<Matrix>(static_cast<std::size_t>(outputs), l));
}

VariationalGaussian VariationalGaussian::whitened_prior(Eigen::Index size, Eigen::Index outputs,
                                                        double factor_scale) {
  if (!(factor_scale > 0.0)) throw std::invalid_argument("whitened_prior: factor_scale must be > 0");
  VariationalGaussian q = from_factors(
      Matrix::Zero(size, outputs),
      std::vector<Matrix>(static_cast<std::size_t>(outputs), factor_scale * Matrix::Identity(size, size)));
  q.whitened = true;
  return q;
}

VariationalGaussian VariationalGaussian::unwhiten(const Matrix& kzz_chol) const {
  if (!whitened) return *this;
  if (kzz_chol.rows() != size()) throw std::invalid_argument("unwhiten: size mismatch");
  std::vector<Matrix> lower;
  for (Eigen::Index k = 0; k < outputs(); ++k) {
    lower.push_back(kzz_chol.triangularView<Eigen::Lower>() * factor(k));
  }
  return from_factors(kzz_chol.triangularView<Eigen::Lower>() * mean, lower);
}

GaussianVars GaussianVars::bind(const VariationalGaussian& q, ad::Binder& binder) {
  GaussianVars v{binder.bind(q.mean), {}, q.whitened};
  for (const auto& raw : q.chol_raw) v.chol_raw.push_back(binder.bind(raw));
  return v;
}

GaussianVars GaussianVars::constant(const VariationalGaussian& q) {
  GaussianVars v{ad::Var::constant(q.mean), {}, q.whitened};
  for (const auto& raw : q.chol_raw) v.chol_raw.push_back(ad::Var::constant(raw));
  return v;
}

Likelihood Likelihood::gaussian(double noise_variance) {
  if (noise_variance <= 0.0) throw std::invalid_argument("noise variance must be positive");
  Likelihood l;
  l.kind = LikelihoodKind::Gaussian;
  l.log_noise_variance = Matrix::Constant(1, 1, std::log(noise_variance));
  return l;
}

Likelihood Likelihood::bernoulli(int n_quad) {
  if (n_quad < 1) throw std::invalid_argument("n_quad must be >= 1");
  Likelihood l;
  l.kind = LikelihoodKind::Bernoulli;
  l.n_quad = n_quad;
  return l;
}

double Likelihood::noise_variance() const { return std::exp(log_noise_variance(0, 0)); }

InducingPosterior prepare_posterior(const ad::Var& kzz, const GaussianVars& q,
                                    const JitterPolicy& policy) {
  const Eigen::Index m = kzz.rows();
  double jitter = 0.0;
  ad::Var chol = ad::cholesky(kzz, policy, &jitter);
  ad::Var chol_inv = ad::solve_triangular(chol, ad::Var::constant(Matrix::Identity(m, m)));
  InducingPosterior post = prepare_posterior_factored(chol, chol_inv, q);
  post.jitter = jitter;
  return post;
}

InducingPosterior prepare_posterior_factored(const ad::Var& chol, const ad::Var& chol_inv,
                                             const GaussianVars& q) {
  const Eigen::Index m = chol.rows();
  if (q.mean.rows() != m) throw std::invalid_argument("prepare_posterior: size mismatch");
  InducingPosterior post;
  post.chol = chol;
  post.chol_inv = chol_inv;
  post.whitened = q.whitened;
  post.proj_mean = q.whitened ? q.mean : ad::matmul(post.chol_inv, q.mean);

  std::vector<ad::Var> blocks;
  const ad::Var eye = ad::Var::constant(Matrix::Identity(m, m));
  for (const auto& raw : q.chol_raw) {
    ad::Var v = q.whitened ? ad::tril_logdiag(raw) : ad::matmul(post.chol_inv, ad::tril_logdiag(raw));
    post.whitened_factors.push_back(v);
    blocks.push_back(ad::sub(ad::gram(v), eye));
  }
  post.quad = blocks.size() == 1 ? blocks.front() : ad::hcat(blocks);
  return post;
}

MarginalVars posterior_marginal(const InducingPosterior& post, const ad::Var& kxz,
                                const ad::Var& prior_diag) {
  // B = K_XZ L_K^{-T}: one GEMM per query batch.
  return whitened_marginal(post, ad::matmul(kxz, ad::transpose(post.chol_inv)), prior_diag);
}

MarginalVars whitened_marginal(const InducingPosterior& post, const ad::Var& whitened_cross,
                               const ad::Var& prior_diag) {
  ad::Var mean = ad::matmul(whitened_cross, post.proj_mean);
  ad::Var var = ad::add(ad::quad_diag(whitened_cross, post.quad), prior_diag);
  return {mean, ad::clamp_min(var, kVarianceFloor)};
}

ad::Var kl_divergence(const InducingPosterior& post, const GaussianVars& q) {
  const double m = static_cast<double>(post.chol.rows());
  const double k = static_cast<double>(q.chol_raw.size());
  // log|S_k| − log|K| reduces to log|V_k|² in whitened coordinates.
  ad::Var logdet_k = post.whitened ? ad::Var::constant(0.0) : ad::sum(ad::log(ad::diag(post.chol)));
  ad::Var trace_terms = ad::sum_squares(post.proj_mean);
  ad::Var logdet_s = ad::Var::constant(0.0);
  for (std::size_t i = 0; i < q.chol_raw.size(); ++i) {
    trace_terms = ad::add(trace_terms, ad::sum_squares(post.whitened_factors[i]));
    logdet_s = ad::add(logdet_s, ad::sum(ad::diag(q.chol_raw[i])));
  }
  // ½ Σ_k [tr(K⁻¹S_k) + m_kᵀK⁻¹m_k − M + log|K| − log|S_k|]
  ad::Var total = ad::add(trace_terms, ad::scale(logdet_k, 2.0 * k));
  total = ad::sub(total, ad::scale(logdet_s, 2.0));
  return ad::scale(ad::shift(total, -m * k), 0.5);
}

Conditional sparse_conditional(const Matrix& xq, const Matrix& z, const KernelParams& kernel,
                               const Vector& u) {
  if (u.size() != z.rows()) throw std::invalid_argument("sparse_conditional: u size mismatch");
  const CholeskyFactor f = cholesky_psd(kernel_matrix(z, z, kernel));
  const Matrix kxz = kernel_matrix(xq, z, kernel);
  // A = L⁻¹ K_ZX
  const Matrix a = solve_triangular(f.lower, kxz.transpose());
  Conditional c;
  c.mean = a.transpose() * solve_triangular(f.lower, u);
  c.cov = kernel_matrix(xq, xq, kernel) - a.transpose() * a;
  return c;
}

Marginal variational_marginal(const Matrix& xq, const Matrix& z, const KernelParams& kernel,
                              const VariationalGaussian& q) {
  if (q.size() != z.rows()) throw std::invalid_argument("variational_marginal: size mismatch");
  const KernelVars kv = KernelVars::constant(kernel);
  const ad::Var zv = ad::Var::constant(z);
  const InducingPosterior post =
      prepare_posterior(kernel_matrix(zv, zv, kv), GaussianVars::constant(q));
  const MarginalVars mv = posterior_marginal(post, kernel_matrix(ad::Var::constant(xq), zv, kv),
                                             ad::Var::constant(kernel.signal_variance()));
  return {mv.mean.value(), mv.var.value()};
}

double kl_gaussian(const VariationalGaussian& q, const Matrix& kzz) {
  const GaussianVars qv = GaussianVars::constant(q);
  return kl_divergence(prepare_posterior(ad::Var::constant(kzz), qv), qv).item();
}

Vector expected_gaussian_loglik(const Vector& y, const Vector& mean, const Vector& var,
                                double noise_variance) {
  if (y.size() != mean.size() || y.size() != var.size()) {
    throw std::invalid_argument("expected_gaussian_loglik: length mismatch");
  }
  const double c = -0.5 * std::log(2.0 * std::numbers::pi * noise_variance);
  return (c - 0.5 * ((y - mean).array().square() + var.array()) / noise_variance).matrix();
}

ad::Var expected_gaussian_loglik(const Vector& y, const ad::Var& mean, const ad::Var& var,
                                 const ad::Var& log_noise_variance) {
  ad::Var resid = ad::sub(ad::Var::constant(Matrix(y)), mean);
  ad::Var spread = ad::add(ad::square(resid), var);
  ad::Var quad = ad::mul(spread, ad::exp(ad::neg(log_noise_variance)));
  ad::Var out = ad::sub(ad::scale(quad, -0.5), ad::scale(log_noise_variance, 0.5));
  return ad::shift(out, -0.5 * std::log(2.0 * std::numbers::pi));
}

GaussHermite GaussHermite::rule(int n) {
  if (n < 1) throw std::invalid_argument("GaussHermite::rule: n must be >= 1");
  // Golub–Welsch: eigen-decomposition of the symmetric Jacobi matrix.
  Matrix jacobi = Matrix::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(0.5 * k);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  GaussHermite gh;
  gh.nodes = eig.eigenvalues();
  gh.weights = std::sqrt(std::numbers::pi) * eig.eigenvectors().row(0).transpose().array().square();
  return gh;
}

namespace {

ad::Var quadrature_points(const ad::Var& mean, const ad::Var& var, const GaussHermite& gh) {
  ad::Var spread = ad::sqrt(ad::scale(var, 2.0));
  ad::Var offsets = ad::matmul(spread, ad::Var::constant(Matrix(gh.nodes.transpose())));
  return ad::add(offsets, mean);
}

}  // namespace

ad::Var expected_bernoulli_loglik(const Vector& y, const ad::Var& mean, const ad::Var& var,
                                  int n_quad) {
  const GaussHermite gh = GaussHermite::rule(n_quad);
  ad::Var g = quadrature_points(mean, ad::clamp_min(var, kVarianceFloor), gh);
  ad::Var logp = ad::log_normal_cdf(ad::mul(g, ad::Var::constant(Matrix(y))));
  return ad::matmul(logp,
                    ad::Var::constant(Matrix(gh.weights / std::sqrt(std::numbers::pi))));
}

Vector expected_bernoulli_loglik(const Vector& y, const Vector& mean, const Vector& var,
                                 int n_quad) {
  if (y.size() != mean.size() || y.size() != var.size()) {
    throw std::invalid_argument("expected_bernoulli_loglik: length mismatch");
  }
  return expected_bernoulli_loglik(y, ad::Var::constant(Matrix(mean)),
                                   ad::Var::constant(Matrix(var)), n_quad)
      .value()
      .col(0);
}

Vector bernoulli_predictive(const Vector& mean, const Vector& var, int n_quad) {
  const GaussHermite gh = GaussHermite::rule(n_quad);
  ad::Var g = quadrature_points(ad::Var::constant(Matrix(mean)),
                                ad::Var::constant(Matrix(var.cwiseMax(kVarianceFloor))), gh);
  Matrix cdf = ad::normal_cdf(g).value();
  return cdf * (gh.weights / std::sqrt(std::numbers::pi));
}

}  // namespace diffgp
