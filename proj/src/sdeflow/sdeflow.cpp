#include "diffgp/sdeflow.hpp"

#include "diffgp/errors.hpp"
#include "diffgp/random.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

namespace diffgp {

Eigen::Index InducingField::inducing_rows() const {
  return inducing.rows() * (inducing_times ? inducing_times->rows() : 1);
}

void InducingField::validate() const {
  if (inducing.rows() < 1 || inducing.cols() < 1) {
    throw std::invalid_argument("field: empty inducing set");
  }
  if (kernel.spatial.dims() != dims()) throw std::invalid_argument("field: kernel dimension mismatch");
  if (temporal() != kernel.has_temporal()) {
    throw std::invalid_argument("field: temporal inducing times and kernel must come together");
  }
  if (temporal() && (inducing_times->cols() != 1 || kernel.temporal->dims() != 1)) {
    throw std::invalid_argument("field: temporal inputs are scalar");
  }
  if (q.size() != inducing_rows() || q.outputs() != dims() ||
      static_cast<Eigen::Index>(q.chol_raw.size()) != dims()) {
    throw std::invalid_argument("field: variational shape mismatch");
  }
}

InducingField make_field(const Matrix& inducing, double flow_time, const FieldOptions& opts) {
  if (opts.temporal_points < 0) throw std::invalid_argument("make_field: temporal_points < 0");
  InducingField field;
  field.inducing = inducing;
  field.kernel.spatial =
      KernelParams::make(inducing.cols(), opts.lengthscale, opts.signal_variance);
  Matrix kzz = kernel_matrix(inducing, inducing, field.kernel.spatial);
  if (opts.temporal_points > 0) {
    const int mt = opts.temporal_points;
    Matrix zt(mt, 1);
    for (int j = 0; j < mt; ++j) zt(j, 0) = mt > 1 ? flow_time * j / (mt - 1) : 0.0;
    double ls = opts.temporal_lengthscale;
    if (ls <= 0.0) ls = (mt > 1 && flow_time > 0.0) ? flow_time / (mt - 1) : 1.0;
    field.kernel.temporal = KernelParams::make(1, ls, 1.0);
    field.inducing_times = zt;
    kzz = kron(kzz, kernel_matrix(zt, zt, *field.kernel.temporal));
  }
  field.q = opts.whiten
                ? VariationalGaussian::whitened_prior(kzz.rows(), inducing.cols(), opts.factor_scale)
                : VariationalGaussian::prior_scaled(kzz, inducing.cols(), opts.factor_scale,
                                                    JitterPolicy::starting_at(1e-6));
  return field;
}

void FlowConfig::validate() const {
  if (!(flow_time >= 0.0) || !std::isfinite(flow_time)) {
    throw std::invalid_argument("flow time must be finite and >= 0");
  }
  if (n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
}

std::vector<double> time_grid(const FlowConfig& cfg) {
  const int k = cfg.steps_taken();
  std::vector<double> t(static_cast<std::size_t>(k) + 1, 0.0);
  for (int i = 1; i <= k; ++i) t[static_cast<std::size_t>(i)] = i == k ? cfg.flow_time : i * cfg.dt();
  return t;
}

FieldVars FieldVars::bind(const InducingField& field, ad::Binder& binder) {
  field.validate();
  FieldVars v;
  v.inducing = binder.bind(field.inducing);
  v.spatial = KernelVars::bind(field.kernel.spatial, binder);
  if (field.temporal()) {
    v.inducing_times = ad::Var::constant(*field.inducing_times);
    v.temporal = KernelVars{binder.bind(field.kernel.temporal->log_lengthscales),
                            ad::Var::constant(field.kernel.temporal->log_signal_variance)};
  }
  v.q = GaussianVars::bind(field.q, binder);
  return v;
}

FieldVars FieldVars::constant(const InducingField& field) {
  field.validate();
  FieldVars v;
  v.inducing = ad::Var::constant(field.inducing);
  v.spatial = KernelVars::constant(field.kernel.spatial);
  if (field.temporal()) {
    v.inducing_times = ad::Var::constant(*field.inducing_times);
    v.temporal = KernelVars::constant(*field.kernel.temporal);
  }
  v.q = GaussianVars::constant(field.q);
  return v;
}

namespace {

ad::Var identity(Eigen::Index n) { return ad::Var::constant(Matrix::Identity(n, n)); }

}  // namespace

FieldPosterior::FieldPosterior(FieldVars vars, const JitterPolicy& policy)
    : vars_(std::move(vars)) {
  ad::Var kss = kernel_matrix(vars_.inducing, vars_.inducing, vars_.spatial);
  prior_var_ = ad::exp(vars_.spatial.log_signal_variance);
  if (!vars_.temporal) {
    post_ = prepare_posterior(kss, vars_.q, policy);
    return;
  }
  // Separable inducing covariance: chol(Kss ⊗ Ktt) = Ls ⊗ Lt.
  double js = 0.0;
  double jt = 0.0;
  ad::Var ls = ad::cholesky(kss, policy, &js);
  ad::Var ktt = kernel_matrix(*vars_.inducing_times, *vars_.inducing_times, *vars_.temporal);
  ad::Var lt = ad::cholesky(ktt, policy, &jt);
  spatial_chol_inv_ = ad::solve_triangular(ls, identity(ls.rows()));
  temporal_chol_inv_ = ad::solve_triangular(lt, identity(lt.rows()));
  post_ = prepare_posterior_factored(ad::kron(ls, lt),
                                     ad::kron(spatial_chol_inv_, temporal_chol_inv_), vars_.q);
  post_.jitter = std::max(js, jt);
  prior_var_ = ad::mul(prior_var_, ad::exp(vars_.temporal->log_signal_variance));
}

FieldMoments FieldPosterior::at(const ad::Var& x, double t) const {
  ad::Var kxz = kernel_matrix(x, vars_.inducing, vars_.spatial);
  MarginalVars mv;
  if (!vars_.temporal) {
    mv = posterior_marginal(post_, kxz, prior_var_);
  } else {
    ad::Var bs = ad::matmul(kxz, ad::transpose(spatial_chol_inv_));
    ad::Var kt = kernel_matrix(ad::Var::constant(t), *vars_.inducing_times, *vars_.temporal);
    ad::Var bt = ad::matmul(kt, ad::transpose(temporal_chol_inv_));
    mv = whitened_marginal(post_, ad::row_kron(bs, bt), prior_var_);
  }
  return {mv.mean, mv.var};
}

ad::Var FieldPosterior::kl() const { return kl_divergence(post_, vars_.q); }

FieldValues field_posterior(const Matrix& x, double t, const InducingField& field,
                            const JitterPolicy& policy) {
  if (x.cols() != field.dims()) throw std::invalid_argument("field_posterior: dimension mismatch");
  const FieldPosterior fp(FieldVars::constant(field), policy);
  const FieldMoments m = fp.at(ad::Var::constant(x), t);
  return {m.drift.value(), m.diffusion.value()};
}

namespace {

void check_state(const Matrix& x) {
  if (!all_finite(x) || (x.array().abs() > kStateBound).any()) {
    throw NonFiniteState("flow state left the finite range |x| <= 1e6");
  }
}

}  // namespace

ad::Var em_step(const ad::Var& x, const FieldMoments& moments, double dt, const Matrix& noise) {
  if (noise.rows() != x.rows() || noise.cols() != x.cols()) {
    throw std::invalid_argument("em_step: noise shape mismatch");
  }
  ad::Var next;
  try {
    ad::Var shock = ad::mul(ad::sqrt(moments.diffusion), ad::Var::constant(std::sqrt(dt) * noise));
    next = ad::add(ad::add(x, ad::scale(moments.drift, dt)), shock);
  } catch (const NonFiniteValue&) {
    throw NonFiniteState("flow state became non-finite");
  }
  check_state(next.value());
  return next;
}

Matrix em_step(const Matrix& x, double t, const VectorField& field, double dt, const Matrix& noise) {
  const ad::Var xv = ad::Var::constant(x);
  return em_step(xv, field.at(xv, t), dt, noise).value();
}

PathNoise draw_sample_noise(const FlowConfig& cfg, Eigen::Index points, Eigen::Index dims,
                            std::uint64_t seed, int sample) {
  PathNoise noise;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(sample)));
  for (int k = 0; k < cfg.steps_taken(); ++k) noise.steps.push_back(standard_normal(points, dims, rng));
  return noise;
}

PathNoise draw_path_noise(const FlowConfig& cfg, Eigen::Index points, Eigen::Index dims,
                          std::uint64_t seed) {
  const int k_steps = cfg.steps_taken();
  PathNoise noise;
  noise.steps.assign(static_cast<std::size_t>(k_steps), Matrix(cfg.n_samples * points, dims));
  for (int s = 0; s < cfg.n_samples; ++s) {
    const PathNoise one = draw_sample_noise(cfg, points, dims, seed, s);
    for (int k = 0; k < k_steps; ++k) {
      noise.steps[static_cast<std::size_t>(k)].middleRows(s * points, points) =
          one.steps[static_cast<std::size_t>(k)];
    }
  }
  return noise;
}

ad::Var flow(const VectorField& field, const ad::Var& x0_stacked, const FlowConfig& cfg,
             const PathNoise& noise, std::vector<Matrix>* record) {
  cfg.validate();
  const int k_steps = cfg.steps_taken();
  if (static_cast<int>(noise.steps.size()) < k_steps) {
    throw std::invalid_argument("flow: not enough noise steps");
  }
  const std::vector<double> grid = time_grid(cfg);
  const double dt = cfg.dt();
  ad::Var x = x0_stacked;
  if (record) record->push_back(x.value());
  for (int k = 0; k < k_steps; ++k) {
    x = em_step(x, field.at(x, grid[static_cast<std::size_t>(k)]), dt,
                noise.steps[static_cast<std::size_t>(k)]);
    if (record) record->push_back(x.value());
  }
  return x;
}

Matrix TrajectoryBatch::state(int sample, int step) const {
  if (sample < 0 || sample >= samples || step < 0 || step > steps()) {
    throw std::out_of_range("TrajectoryBatch::state: index out of range");
  }
  return states[static_cast<std::size_t>(step)].middleRows(sample * points, points);
}

TrajectoryBatch integrate(const Matrix& x0, const VectorField& field, const FlowConfig& cfg) {
  cfg.validate();
  TrajectoryBatch batch;
  batch.samples = cfg.n_samples;
  batch.points = x0.rows();
  batch.dims = x0.cols();
  batch.times = time_grid(cfg);
  const PathNoise noise = draw_path_noise(cfg, x0.rows(), x0.cols(), cfg.seed);
  flow(field, ad::Var::constant(stack_samples(x0, cfg.n_samples)), cfg, noise, &batch.states);
  return batch;
}

void write_trajectory_csv(std::ostream& out, const TrajectoryBatch& batch) {
  out << "s,k,t";
  for (Eigen::Index d = 0; d < batch.dims; ++d) out << ",x" << (d + 1);
  out << '\n';
  const auto old_precision = out.precision(17);
  for (int s = 0; s < batch.samples; ++s) {
    for (int k = 0; k <= batch.steps(); ++k) {
      const Matrix& st = batch.states[static_cast<std::size_t>(k)];
      for (Eigen::Index i = 0; i < batch.points; ++i) {
        out << s << ',' << k << ',' << batch.times[static_cast<std::size_t>(k)];
        for (Eigen::Index d = 0; d < batch.dims; ++d) out << ',' << st(s * batch.points + i, d);
        out << '\n';
      }
    }
  }
  out.precision(old_precision);
}

Matrix stack_samples(const Matrix& x, int samples) {
  if (samples < 1) throw std::invalid_argument("stack_samples: samples must be >= 1");
  return x.replicate(samples, 1);
}

}  // namespace diffgp
