#include "diffgp/checks.hpp"

#include "diffgp/model.hpp"
#include "diffgp/random.hpp"

#include <Eigen/Cholesky>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace diffgp::checks {

namespace {

using Clock = std::chrono::steady_clock;

Matrix normal_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  return standard_normal(r, c, rng) * sd;
}

/// Plain RBF-ARD, written out independently of the library kernels.
Matrix rbf(const Matrix& a, const Matrix& b, const RowVector& ls, double var) {
  Matrix k(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      k(i, j) = var * std::exp(-0.5 * ((a.row(i) - b.row(j)).array() / ls.array()).square().sum());
    }
  }
  return k;
}

Matrix with_jitter(Matrix k, double rel) {
  k.diagonal().array() += rel * k.diagonal().mean();
  return k;
}

double logdet_chol(const Eigen::LLT<Matrix>& c) {
  return 2.0 * c.matrixLLT().diagonal().array().log().sum();
}

/// KL[N(m, LLᵀ) ‖ N(0, K)] by dense formulas.
double dense_kl(const Vector& m, const Matrix& l, const Matrix& k) {
  const Eigen::LLT<Matrix> kc(k);
  return 0.5 * (kc.solve(Matrix(l * l.transpose())).trace() + m.dot(kc.solve(m)) -
                static_cast<double>(k.rows()) + logdet_chol(kc) -
                2.0 * l.diagonal().array().log().sum());
}

/// Random 10-point problem with a perturbed, non-trivial variational state.
struct Problem {
  Matrix x;
  Vector y;
  DiffGPModel model;
};

Problem random_problem(std::uint64_t seed, double flow_time, int steps, LikelihoodKind kind,
                       int temporal_points, bool whiten = true) {
  Rng rng(seed);
  Problem p;
  p.x = normal_matrix(10, 2, rng);
  p.y = (p.x.col(0).array().sin() + 0.3 * p.x.col(1).array()).matrix() + normal_matrix(10, 1, rng, 0.1);
  if (kind == LikelihoodKind::Bernoulli) p.y = p.y.array().sign();
  ModelOptions mo;
  mo.inducing = 4;
  mo.flow_time = flow_time;
  mo.n_steps = steps;
  mo.likelihood = kind;
  mo.temporal_points = temporal_points;
  mo.field_variance = 0.3;
  mo.whiten = whiten;
  mo.seed = seed;
  p.model = initialize_model(p.x, mo);
  auto& f = p.model.field;
  f.q.mean = normal_matrix(f.q.mean.rows(), 2, rng, 0.3);
  for (auto& raw : f.q.chol_raw) raw += normal_matrix(raw.rows(), raw.cols(), rng, 0.05);
  f.kernel.spatial.log_lengthscales.array() += normal_matrix(1, 2, rng, 0.1).array();
  auto& g = p.model.predictor;
  g.q.mean = normal_matrix(4, 1, rng, 0.5);
  g.q.chol_raw[0] += normal_matrix(4, 4, rng, 0.05);
  g.kernel.log_lengthscales.array() += normal_matrix(1, 2, rng, 0.1).array();
  return p;
}

CheckResult finish(CheckResult r, Clock::time_point t0) {
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

}  // namespace

std::string format_line(const CheckResult& r) {
  char head[160];
  std::snprintf(head, sizeof head, "%s [%d] %s: ", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str());
  char tail[48];
  std::snprintf(tail, sizeof tail, " (%.1f s)", r.seconds);
  return head + r.detail + tail;
}

CheckResult gradient_correctness() {
  const auto t0 = Clock::now();
  CheckResult r{1, "gradient correctness", true, "", 0.0};
  constexpr double kStep = 1e-5, kRel = 1e-4, kAbs = 1e-7;
  double worst_rel = 0.0, worst_abs = 0.0, largest = 0.0;
  long entries = 0;
  std::ostringstream failures;
  struct Case {
    LikelihoodKind kind;
    int temporal;
    bool whiten;
  };
  const Case cases[] = {{LikelihoodKind::Gaussian, 0, true},
                        {LikelihoodKind::Gaussian, 2, true},
                        {LikelihoodKind::Bernoulli, 0, true},
                        {LikelihoodKind::Gaussian, 2, false}};
  std::uint64_t seed = 1;
  for (const Case& c : cases) {
    Problem p = random_problem(seed++, 0.5, 5, c.kind, c.temporal, c.whiten);
    const PathNoise noise = draw_path_noise(p.model.flow, 10, 2, seed);
    const std::vector<ParameterRef> refs = parameter_refs(p.model);
    LeafMap leaves;
    for (const auto& ref : refs) leaves.emplace(ref.value, ad::Var::parameter(*ref.value));
    ad::backward(elbo(p.model, model_vars(p.model, leaves), p.x, p.y, 1.0, noise));
    for (const auto& ref : refs) {
      const Matrix analytic = leaves.at(ref.value).grad();
      Matrix& value = *ref.value;
      for (Eigen::Index i = 0; i < value.size(); ++i) {
        const double saved = value.data()[i];
        value.data()[i] = saved + kStep;
        const double up = elbo(p.model, model_vars(p.model), p.x, p.y, 1.0, noise).item();
        value.data()[i] = saved - kStep;
        const double down = elbo(p.model, model_vars(p.model), p.x, p.y, 1.0, noise).item();
        value.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * kStep);
        const double err = std::abs(analytic.data()[i] - numeric);
        const double rel = err / std::max(std::abs(analytic.data()[i]), std::abs(numeric));
        ++entries;
        worst_abs = std::max(worst_abs, err);
        largest = std::max(largest, std::abs(analytic.data()[i]));
        if (err > kAbs) {
          worst_rel = std::max(worst_rel, rel);
          if (rel > kRel) {
            r.passed = false;
            failures << ' ' << ref.name << '[' << i << ']';
          }
        }
      }
    }
  }
  std::ostringstream d;
  d << entries << " entries over " << std::size(cases) << " models, largest |gradient| " << largest << ", worst abs error "
    << worst_abs << ", worst relative error beyond 1e-7 abs " << worst_rel << " (tol 1e-4)";
  if (!r.passed) d << "; failing:" << failures.str();
  r.detail = d.str();
  return finish(r, t0);
}

CheckResult zero_flow_reduction() {
  const auto t0 = Clock::now();
  CheckResult r{2, "zero-flow reduction", true, "", 0.0};
  double worst = 0.0;
  for (std::uint64_t seed = 10; seed < 13; ++seed) {
    const Problem p = random_problem(seed, 0.0, 20, LikelihoodKind::Gaussian, 0);
    const DiffGPModel& m = p.model;
    const double got = elbo(m, model_vars(m), p.x, p.y, 1.0, PathNoise{}).item();

    // Dense SVGP ELBO of the predictor, minus the field KL.
    const PredictorGP& g = m.predictor;
    const RowVector ls = g.kernel.log_lengthscales.array().exp();
    const double sv = std::exp(g.kernel.log_signal_variance(0, 0));
    const Matrix kzz = with_jitter(rbf(g.inducing, g.inducing, ls, sv), 1e-6);
    const Eigen::LLT<Matrix> kc(kzz);
    const VariationalGaussian gq = g.q.unwhiten(kc.matrixL().toDenseMatrix());
    const Matrix a = kc.solve(Matrix(rbf(p.x, g.inducing, ls, sv).transpose())).transpose();
    const Matrix lq = gq.factor(0);
    const Vector mean = a * gq.mean.col(0);
    const Vector var = (sv + (a * (lq * lq.transpose() - kzz)).cwiseProduct(a).rowwise().sum().array()).matrix();
    const double s2 = std::exp(g.likelihood.log_noise_variance(0, 0));
    double ell = 0.0;
    for (Eigen::Index i = 0; i < p.x.rows(); ++i) {
      const double res = p.y(i) - mean(i);
      ell += -0.5 * std::log(2.0 * std::numbers::pi * s2) - 0.5 * (res * res + var(i)) / s2;
    }
    const InducingField& f = m.field;
    const RowVector fls = f.kernel.spatial.log_lengthscales.array().exp();
    const Matrix kff = with_jitter(rbf(f.inducing, f.inducing, fls, std::exp(f.kernel.spatial.log_signal_variance(0, 0))), 1e-6);
    const VariationalGaussian fq = f.q.unwhiten(Eigen::LLT<Matrix>(kff).matrixL().toDenseMatrix());
    double kl_f = 0.0;
    for (Eigen::Index d = 0; d < fq.mean.cols(); ++d) kl_f += dense_kl(fq.mean.col(d), fq.factor(d), kff);
    const double oracle = ell - dense_kl(gq.mean.col(0), lq, kzz) - kl_f;
    worst = std::max(worst, std::abs(got - oracle));
  }
  r.passed = worst <= 1e-10;
  std::ostringstream d;
  d << "max |ELBO - dense SVGP ELBO| = " << worst << " over 3 models (tol 1e-10)";
  r.detail = d.str();
  return finish(r, t0);
}

namespace {

class ConstantField final : public VectorField {
 public:
  ConstantField(RowVector mu, RowVector sigma) : mu_(std::move(mu)), sigma_(std::move(sigma)) {}
  FieldMoments at(const ad::Var& x, double) const override {
    return {ad::Var::constant(Matrix(mu_.replicate(x.rows(), 1))),
            ad::Var::constant(Matrix(sigma_.replicate(x.rows(), 1)))};
  }

 private:
  RowVector mu_, sigma_;
};

}  // namespace

CheckResult em_increment_law() {
  const auto t0 = Clock::now();
  CheckResult r{3, "EM increment law", true, "", 0.0};
  constexpr Eigen::Index kDraws = 100'000;
  RowVector mu(2), sigma(2);
  mu << 0.7, -1.3;
  sigma << 0.4, 2.5;
  const double dt = 0.05;
  const ConstantField field(mu, sigma);
  Rng rng(derive_seed(3, 0));
  const Matrix x0 = normal_matrix(kDraws, 2, rng);
  const Matrix noise = standard_normal(kDraws, 2, rng);
  const Matrix inc = em_step(x0, 0.0, field, dt, noise) - x0;
  double worst_z = 0.0;
  for (int d = 0; d < 2; ++d) {
    const auto c = inc.col(d).array();
    const double n = static_cast<double>(kDraws);
    const double mean = c.mean();
    const double m2 = (c - mean).square().mean();
    const double m4 = (c - mean).square().square().mean();
    const double z_mean = std::abs(mean - mu(d) * dt) / std::sqrt(m2 / n);
    const double z_var = std::abs(m2 - sigma(d) * dt) / std::sqrt((m4 - m2 * m2) / n);
    worst_z = std::max({worst_z, z_mean, z_var});
  }
  r.passed = worst_z <= 3.0;
  std::ostringstream d;
  d << "1e5 draws, worst |deviation| = " << worst_z << " standard errors (limit 3)";
  r.detail = d.str();
  return finish(r, t0);
}

CheckResult kl_oracle() {
  const auto t0 = Clock::now();
  CheckResult r{4, "KL oracle", true, "", 0.0};
  constexpr int kSamples = 1'000'000;
  double worst_z = 0.0;
  for (std::uint64_t inst = 0; inst < 5; ++inst) {
    Rng rng(derive_seed(4, inst));
    const Matrix zs = normal_matrix(3, 2, rng);
    const Matrix kzz = with_jitter(rbf(zs, zs, RowVector::Constant(2, 1.0), 1.0), 1e-2);
    Matrix l = normal_matrix(3, 3, rng, 0.2).triangularView<Eigen::Lower>();
    l.diagonal() = (normal_matrix(3, 1, rng, 0.3).array().exp() * 0.6).matrix();
    const Vector m = normal_matrix(3, 1, rng, 0.5);
    const VariationalGaussian q = VariationalGaussian::from_factors(m, {l});
    const double kl = kl_gaussian(q, kzz);

    // Monte Carlo of E_q[log q(u) − log p(u)].
    const Eigen::LLT<Matrix> kc(kzz);
    const Matrix kinv_l = kc.matrixL().solve(Matrix::Identity(3, 3));
    const double logdet_k = logdet_chol(kc);
    const double logdet_s = 2.0 * l.diagonal().array().log().sum();
    const Matrix eps = standard_normal(kSamples, 3, rng);
    const Matrix u = (eps * l.transpose()).rowwise() + m.transpose();
    const Vector log_ratio = (-0.5 * eps.rowwise().squaredNorm().array() - 0.5 * logdet_s +
                              0.5 * (u * kinv_l.transpose()).rowwise().squaredNorm().array() + 0.5 * logdet_k)
                                 .matrix();
    const double mc = log_ratio.mean();
    const double se = std::sqrt((log_ratio.array() - mc).square().mean() / kSamples);
    worst_z = std::max(worst_z, std::abs(kl - mc) / se);
  }
  r.passed = worst_z <= 3.0;
  std::ostringstream d;
  d << "5 instances (M=3) x 1e6 samples, worst |KL - MC| = " << worst_z << " standard errors (limit 3)";
  r.detail = d.str();
  return finish(r, t0);
}

CheckResult kronecker_equivalence() {
  const auto t0 = Clock::now();
  CheckResult r{5, "Kronecker equivalence", true, "", 0.0};
  double worst = 0.0;
  for (std::uint64_t inst = 0; inst < 5; ++inst) {
    Rng rng(derive_seed(5, inst));
    const Matrix x = normal_matrix(4, 2, rng);
    const Matrix zs = normal_matrix(3, 2, rng);
    const Matrix zt = (normal_matrix(2, 1, rng).array().abs() * 2.0).matrix();
    const double t = std::abs(normal_matrix(1, 1, rng)(0, 0));
    SpatioTemporalKernel k;
    k.spatial = KernelParams::make(2, 0.8, 1.3);
    k.spatial.log_lengthscales(0, 1) += 0.4;
    k.temporal = KernelParams::make(1, 0.7, 0.9);
    const RowVector ls = k.spatial.log_lengthscales.array().exp();
    const RowVector lt = k.temporal->log_lengthscales.array().exp();
    const double vs = std::exp(k.spatial.log_signal_variance(0, 0));
    const double vt = std::exp(k.temporal->log_signal_variance(0, 0));

    // Explicit K((x,t),(z_s,z_t)) = K(x,z_s)·k(t,z_t) for every pair.
    const Matrix tq = Matrix::Constant(1, 1, t);
    Matrix cross(4, 6), inducing(6, 6);
    for (int i = 0; i < 4; ++i) {
      for (int s = 0; s < 3; ++s) {
        for (int j = 0; j < 2; ++j) {
          cross(i, s * 2 + j) = rbf(x.row(i), zs.row(s), ls, vs)(0, 0) * rbf(tq, zt.row(j), lt, vt)(0, 0);
        }
      }
    }
    for (int s = 0; s < 3; ++s) {
      for (int j = 0; j < 2; ++j) {
        for (int s2 = 0; s2 < 3; ++s2) {
          for (int j2 = 0; j2 < 2; ++j2) {
            inducing(s * 2 + j, s2 * 2 + j2) =
                rbf(zs.row(s), zs.row(s2), ls, vs)(0, 0) * rbf(zt.row(j), zt.row(j2), lt, vt)(0, 0);
          }
        }
      }
    }
    worst = std::max(worst, (st_kernel_cross(x, t, zs, zt, k) - cross).cwiseAbs().maxCoeff());
    worst = std::max(worst, (st_kernel_inducing(zs, zt, k) - inducing).cwiseAbs().maxCoeff());
  }
  r.passed = worst <= 1e-10;
  std::ostringstream d;
  d << "Ms=3, Mt=2, N=4, 5 instances, max abs difference " << worst << " (tol 1e-10)";
  r.detail = d.str();
  return finish(r, t0);
}

std::vector<CheckResult> run_fast_checks() {
  return {gradient_correctness(), zero_flow_reduction(), em_increment_law(), kl_oracle(),
          kronecker_equivalence()};
}

}  // namespace diffgp::checks
