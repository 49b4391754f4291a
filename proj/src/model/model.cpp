#include "diffgp/model.hpp"

#include "diffgp/errors.hpp"
#include "diffgp/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace diffgp {

namespace {

const JitterPolicy kInducingPolicy = JitterPolicy::starting_at(1e-6);

// Stream tags for derive_seed(seed, iteration, tag).
constexpr std::uint64_t kWarmstartBatchTag = 11;
constexpr std::uint64_t kJointBatchTag = 12;
constexpr std::uint64_t kPathNoiseTag = 13;

}  // namespace

void DiffGPModel::validate() const {
  field.validate();
  flow.validate();
  if (predictor.inducing.cols() != dims() || predictor.kernel.dims() != dims()) {
    throw std::invalid_argument("model: predictor dimension differs from the field state");
  }
  if (predictor.q.size() != predictor.inducing.rows() || predictor.q.outputs() != 1 ||
      predictor.q.chol_raw.size() != 1) {
    throw std::invalid_argument("model: predictor variational shape mismatch");
  }
}

Matrix kmeans(const Matrix& x, Eigen::Index k, int iters, std::uint64_t seed) {
  const Eigen::Index n = x.rows();
  if (n < 1 || k < 1) throw std::invalid_argument("kmeans: empty input or k < 1");
  if (k >= n) return x;
  Rng rng(derive_seed(seed, 0x6b6d));
  Matrix c(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  c.row(0) = x.row(pick(rng));
  Vector d2 = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Eigen::Index j = 1; j < k; ++j) {
    const double total = d2.sum();
    Eigen::Index chosen = n - 1;
    if (total > 0.0) {
      double r = unit(rng) * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2(i);
        if (r <= 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    c.row(j) = x.row(chosen);
    d2 = d2.cwiseMin((x.rowwise() - c.row(j)).rowwise().squaredNorm());
  }
  std::vector<Eigen::Index> assign(static_cast<std::size_t>(n));
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (c.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      assign[static_cast<std::size_t>(i)] = best;
    }
    Matrix sums = Matrix::Zero(k, x.cols());
    Vector counts = Vector::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      counts(assign[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (Eigen::Index j = 0; j < k; ++j) {
      if (counts(j) > 0.0) c.row(j) = sums.row(j) / counts(j);
    }
  }
  return c;
}

DiffGPModel initialize_model(const Matrix& x, const ModelOptions& opts) {
  if (opts.inducing < 1) throw std::invalid_argument("initialize_model: inducing count < 1");
  DiffGPModel model;
  model.flow = FlowConfig{opts.flow_time, opts.n_steps, opts.train_samples, opts.seed};
  model.flow.validate();
  const Matrix z = kmeans(x, opts.inducing, opts.kmeans_iters, opts.seed);

  FieldOptions fo;
  fo.signal_variance = opts.field_variance;
  fo.temporal_points = opts.temporal_points;
  fo.whiten = opts.whiten;
  model.field = make_field(z, opts.flow_time, fo);

  PredictorGP& g = model.predictor;
  g.inducing = z;
  g.kernel = KernelParams::make(x.cols(), 1.0, 1.0);
  g.q = opts.whiten ? VariationalGaussian::whitened_prior(z.rows(), 1, 1.0)
                    : VariationalGaussian::prior_scaled(kernel_matrix(z, z, g.kernel), 1, 1.0,
                                                        kInducingPolicy);
  g.likelihood = opts.likelihood == LikelihoodKind::Gaussian
                     ? Likelihood::gaussian(opts.noise_variance)
                     : Likelihood::bernoulli();
  model.validate();
  return model;
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::FieldInducing: return "field_inducing";
    case ParamGroup::FieldKernel: return "field_kernel";
    case ParamGroup::FieldMean: return "field_mean";
    case ParamGroup::FieldCovariance: return "field_covariance";
    case ParamGroup::PredictorInducing: return "predictor_inducing";
    case ParamGroup::PredictorKernel: return "predictor_kernel";
    case ParamGroup::PredictorMean: return "predictor_mean";
    case ParamGroup::PredictorCovariance: return "predictor_covariance";
    case ParamGroup::NoiseVariance: return "noise_variance";
  }
  return "unknown";
}

std::vector<ParameterRef> parameter_refs(DiffGPModel& model, bool field, bool predictor) {
  std::vector<ParameterRef> refs;
  if (field) {
    InducingField& f = model.field;
    refs.push_back({"field.inducing", ParamGroup::FieldInducing, &f.inducing});
    refs.push_back({"field.log_lengthscales", ParamGroup::FieldKernel,
                    &f.kernel.spatial.log_lengthscales});
    refs.push_back({"field.log_signal_variance", ParamGroup::FieldKernel,
                    &f.kernel.spatial.log_signal_variance});
    if (f.kernel.temporal) {
      refs.push_back({"field.temporal_log_lengthscale", ParamGroup::FieldKernel,
                      &f.kernel.temporal->log_lengthscales});
    }
    refs.push_back({"field.q_mean", ParamGroup::FieldMean, &f.q.mean});
    for (std::size_t d = 0; d < f.q.chol_raw.size(); ++d) {
      refs.push_back({"field.q_chol." + std::to_string(d), ParamGroup::FieldCovariance,
                      &f.q.chol_raw[d]});
    }
  }
  if (predictor) {
    PredictorGP& g = model.predictor;
    refs.push_back({"predictor.inducing", ParamGroup::PredictorInducing, &g.inducing});
    refs.push_back({"predictor.log_lengthscales", ParamGroup::PredictorKernel,
                    &g.kernel.log_lengthscales});
    refs.push_back({"predictor.log_signal_variance", ParamGroup::PredictorKernel,
                    &g.kernel.log_signal_variance});
    refs.push_back({"predictor.q_mean", ParamGroup::PredictorMean, &g.q.mean});
    refs.push_back({"predictor.q_chol", ParamGroup::PredictorCovariance, &g.q.chol_raw[0]});
    if (g.likelihood.kind == LikelihoodKind::Gaussian) {
      refs.push_back({"likelihood.log_noise_variance", ParamGroup::NoiseVariance,
                      &g.likelihood.log_noise_variance});
    }
  }
  return refs;
}

ModelVars model_vars(const DiffGPModel& model, const LeafMap& leaves) {
  auto var = [&](const Matrix& m) {
    const auto it = leaves.find(&m);
    return it != leaves.end() ? it->second : ad::Var::constant(m);
  };
  auto kernel = [&](const KernelParams& p) {
    return KernelVars{var(p.log_lengthscales), var(p.log_signal_variance)};
  };
  auto gaussian = [&](const VariationalGaussian& q) {
    GaussianVars g{var(q.mean), {}, q.whitened};
    for (const auto& raw : q.chol_raw) g.chol_raw.push_back(var(raw));
    return g;
  };
  const InducingField& f = model.field;
  ModelVars v;
  v.field.inducing = var(f.inducing);
  v.field.spatial = kernel(f.kernel.spatial);
  if (f.temporal()) {
    v.field.inducing_times = ad::Var::constant(*f.inducing_times);
    v.field.temporal = kernel(*f.kernel.temporal);
  }
  v.field.q = gaussian(f.q);
  const PredictorGP& g = model.predictor;
  v.predictor_inducing = var(g.inducing);
  v.predictor_kernel = kernel(g.kernel);
  v.predictor_q = gaussian(g.q);
  v.log_noise_variance = var(g.likelihood.log_noise_variance);
  return v;
}

namespace {

struct PredictorTerms {
  ad::Var loglik_sum;
  ad::Var kl;
};

PredictorTerms predictor_terms(const DiffGPModel& model, const ModelVars& v, const ad::Var& xq,
                               const Vector& y) {
  const InducingPosterior post = prepare_posterior(
      kernel_matrix(v.predictor_inducing, v.predictor_inducing, v.predictor_kernel), v.predictor_q,
      kInducingPolicy);
  const MarginalVars mv =
      posterior_marginal(post, kernel_matrix(xq, v.predictor_inducing, v.predictor_kernel),
                         ad::exp(v.predictor_kernel.log_signal_variance));
  const Likelihood& lik = model.predictor.likelihood;
  ad::Var ll = lik.kind == LikelihoodKind::Gaussian
                   ? expected_gaussian_loglik(y, mv.mean, mv.var, v.log_noise_variance)
                   : expected_bernoulli_loglik(y, mv.mean, mv.var, lik.n_quad);
  return {ad::sum(ll), kl_divergence(post, v.predictor_q)};
}

void check_batch(const Matrix& xb, const Vector& yb, Eigen::Index dims) {
  if (xb.rows() < 1) throw std::invalid_argument("elbo: empty batch");
  if (xb.rows() != yb.size() || xb.cols() != dims) {
    throw std::invalid_argument("elbo: batch shape mismatch");
  }
}

}  // namespace

ad::Var elbo(const DiffGPModel& model, const ModelVars& vars, const Matrix& xb, const Vector& yb,
             double scale, const PathNoise& noise, ElboTerms* terms) {
  check_batch(xb, yb, model.dims());
  const int samples = model.flow.n_samples;
  const FieldPosterior field(vars.field, kInducingPolicy);
  ad::Var xt = flow(field, ad::Var::constant(stack_samples(xb, samples)), model.flow, noise);
  const PredictorTerms g = predictor_terms(model, vars, xt, yb.replicate(samples, 1));
  ad::Var fit = ad::scale(g.loglik_sum, scale / samples);
  ad::Var kl_f = field.kl();
  ad::Var total = ad::sub(ad::sub(fit, g.kl), kl_f);
  if (terms) *terms = {fit.item(), g.kl.item(), kl_f.item(), total.item()};
  return total;
}

ad::Var svgp_elbo(const DiffGPModel& model, const ModelVars& vars, const Matrix& xb,
                  const Vector& yb, double scale, ElboTerms* terms) {
  check_batch(xb, yb, model.dims());
  const PredictorTerms g = predictor_terms(model, vars, ad::Var::constant(xb), yb);
  ad::Var fit = ad::scale(g.loglik_sum, scale);
  ad::Var total = ad::sub(fit, g.kl);
  if (terms) *terms = {fit.item(), g.kl.item(), 0.0, total.item()};
  return total;
}

void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: size mismatch");
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    if (g.rows() != params[i]->rows() || g.cols() != params[i]->cols()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch");
    }
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    params[i]->array() -=
        cfg.lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + cfg.eps);
  }
}

int TrainConfig::batch_size(Eigen::Index n) const {
  if (minibatch_size > 0) return static_cast<int>(std::min<Eigen::Index>(minibatch_size, n));
  return n > 2000 ? 512 : static_cast<int>(n);
}

void TrainConfig::validate(Eigen::Index n) const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (n_iters < 0 || warmstart_iters < 0) throw ConfigError("iteration counts must be >= 0");
  if (minibatch_size < 0 || minibatch_size > n) {
    throw ConfigError("minibatch size must lie in [1, N] (0 selects the default)");
  }
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

namespace {

enum class Objective { Svgp, Joint };

FitResult run_adam(DiffGPModel& model, const Matrix& x, const Vector& y, const TrainConfig& cfg,
                   int n_iters, Objective objective, TrainState& state) {
  const FlushDenormals ftz;
  cfg.validate(x.rows());
  if (x.rows() != y.size()) throw std::invalid_argument("training data shape mismatch");
  const bool joint = objective == Objective::Joint;
  const std::vector<ParameterRef> refs = parameter_refs(model, joint && cfg.train_field, true);
  std::vector<Matrix*> params;
  for (const auto& r : refs) params.push_back(r.value);

  const Eigen::Index n = x.rows();
  const int batch = cfg.batch_size(n);
  const double scale = static_cast<double>(n) / batch;
  const std::string phase = joint ? "joint" : "warmstart";
  const std::uint64_t batch_tag = joint ? kJointBatchTag : kWarmstartBatchTag;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));

  FitResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < n_iters; ++it) {
    const long global = state.iteration;
    Matrix xb_storage;
    Vector yb_storage;
    const Matrix* xb = &x;
    const Vector* yb = &y;
    if (batch < n) {
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(global), batch_tag));
      for (int i = 0; i < batch; ++i) {
        std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
      }
      xb_storage.resize(batch, x.cols());
      yb_storage.resize(batch);
      for (int i = 0; i < batch; ++i) {
        xb_storage.row(i) = x.row(order[static_cast<std::size_t>(i)]);
        yb_storage(i) = y(order[static_cast<std::size_t>(i)]);
      }
      xb = &xb_storage;
      yb = &yb_storage;
    }

    std::vector<Matrix> backup;
    for (const Matrix* p : params) backup.push_back(*p);
    double value = 0.0;
    try {
      LeafMap leaves;
      std::vector<ad::Var> leaf_list;
      for (Matrix* p : params) {
        leaf_list.push_back(ad::Var::parameter(*p));
        leaves.emplace(p, leaf_list.back());
      }
      const ModelVars vars = model_vars(model, leaves);
      ad::Var obj;
      if (joint) {
        const PathNoise noise = draw_path_noise(
            model.flow, batch, model.dims(),
            derive_seed(cfg.seed, static_cast<std::uint64_t>(global), kPathNoiseTag));
        obj = elbo(model, vars, *xb, *yb, scale, noise);
      } else {
        obj = svgp_elbo(model, vars, *xb, *yb, scale);
      }
      value = obj.item();
      ad::backward(ad::neg(obj));
      std::vector<Matrix> grads;
      for (const auto& leaf : leaf_list) grads.push_back(leaf.grad());
      adam_step(params, grads, state.adam, {.lr = cfg.learning_rate});
      for (const Matrix* p : params) {
        if (!all_finite(*p)) throw NonFiniteGradient("parameter update produced non-finite values");
      }
      model.validate();
    } catch (const NumericError& e) {
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = backup[i];
      result.status = FitStatus::Aborted;
      result.message = phase + " iteration " + std::to_string(global) + ": " + e.what();
      break;
    }
    ++state.iteration;
    ++result.iterations;
    if (global % cfg.eval_every == 0 || it + 1 == n_iters) {
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.trace.push_back({phase, global, value, wall});
    }
  }
  return result;
}

}  // namespace

FitResult warmstart_sgp(DiffGPModel& model, const Matrix& x, const Vector& y,
                        const TrainConfig& cfg) {
  TrainState state;
  return run_adam(model, x, y, cfg, cfg.warmstart_iters, Objective::Svgp, state);
}

FitResult fit(DiffGPModel& model, const Matrix& x, const Vector& y, const TrainConfig& cfg,
              TrainState* state) {
  TrainState local;
  return run_adam(model, x, y, cfg, cfg.n_iters, Objective::Joint, state ? *state : local);
}

}  // namespace diffgp
