#include "diffgp/model.hpp"

#include "diffgp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace diffgp {

Vector Prediction::mean_avg() const { return mean.rowwise().mean(); }

Vector Prediction::y_var_mixture() const {
  const Vector m = mean_avg();
  const Vector second = (y_var.array() + mean.array().square()).rowwise().mean();
  return (second.array() - m.array().square()).cwiseMax(0.0);
}

Vector Prediction::prob_avg() const { return prob.rowwise().mean(); }

Prediction predict(const DiffGPModel& model, const Matrix& x, int samples, std::uint64_t seed) {
  const FlushDenormals ftz;
  if (samples < 1) throw std::invalid_argument("predict: samples must be >= 1");
  if (x.cols() != model.dims()) throw std::invalid_argument("predict: dimension mismatch");
  const ModelVars vars = model_vars(model);
  const JitterPolicy policy = JitterPolicy::starting_at(1e-6);
  const FieldPosterior field(vars.field, policy);
  const InducingPosterior post = prepare_posterior(
      kernel_matrix(vars.predictor_inducing, vars.predictor_inducing, vars.predictor_kernel),
      vars.predictor_q, policy);
  const ad::Var prior_var = ad::exp(vars.predictor_kernel.log_signal_variance);
  FlowConfig one = model.flow;
  one.n_samples = 1;

  const Eigen::Index n = x.rows();
  const Likelihood& lik = model.predictor.likelihood;
  Prediction p;
  p.kind = lik.kind;
  p.mean.resize(n, samples);
  p.var.resize(n, samples);
  if (lik.kind == LikelihoodKind::Gaussian) {
    p.y_var.resize(n, samples);
  } else {
    p.prob.resize(n, samples);
  }
  for (int s = 0; s < samples; ++s) {
    const PathNoise noise = draw_sample_noise(one, n, model.dims(), seed, s);
    const ad::Var xt = flow(field, ad::Var::constant(x), one, noise);
    const MarginalVars mv =
        posterior_marginal(post, kernel_matrix(xt, vars.predictor_inducing, vars.predictor_kernel),
                           prior_var);
    p.mean.col(s) = mv.mean.value().col(0);
    p.var.col(s) = mv.var.value().col(0);
    if (lik.kind == LikelihoodKind::Gaussian) {
      p.y_var.col(s) = p.var.col(s).array() + lik.noise_variance();
    } else {
      p.prob.col(s) = bernoulli_predictive(p.mean.col(s), p.var.col(s), lik.n_quad);
    }
  }
  return p;
}

double rmse(const Vector& y, const Vector& pred) {
  if (y.size() != pred.size() || y.size() == 0) throw std::invalid_argument("rmse: length mismatch");
  return std::sqrt((y - pred).squaredNorm() / static_cast<double>(y.size()));
}

double mean_gaussian_loglik(const Vector& y, const Vector& mean, const Vector& var) {
  if (y.size() != mean.size() || y.size() != var.size() || y.size() == 0) {
    throw std::invalid_argument("mean_gaussian_loglik: length mismatch");
  }
  const auto r2 = (y - mean).array().square();
  return (-0.5 * (2.0 * std::numbers::pi * var.array()).log() - 0.5 * r2 / var.array()).mean();
}

double auc(const Vector& labels, const Vector& scores) {
  const Eigen::Index n = labels.size();
  if (scores.size() != n) throw std::invalid_argument("auc: length mismatch");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores(a) < scores(b); });
  double rank_sum = 0.0;
  double positives = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && scores(idx[static_cast<std::size_t>(j + 1)]) == scores(idx[static_cast<std::size_t>(i)])) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index t = i; t <= j; ++t) {
      if (labels(idx[static_cast<std::size_t>(t)]) > 0.0) {
        rank_sum += midrank;
        positives += 1.0;
      }
    }
    i = j + 1;
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0.0 || negatives == 0.0) {
    throw std::invalid_argument("auc: both classes must be present");
  }
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

RegressionMetrics regression_metrics(const Prediction& pred, const Vector& y_true, double y_shift,
                                     double y_scale, Averaging mode) {
  if (pred.kind != LikelihoodKind::Gaussian) {
    throw std::invalid_argument("regression_metrics: not a regression prediction");
  }
  const double s2 = y_scale * y_scale;
  if (mode == Averaging::Mixture) {
    const Vector mean = (pred.mean_avg().array() * y_scale + y_shift).matrix();
    // log (1/S) Σ_s N(y | μ_s, v_s), by log-sum-exp per point.
    Vector ll(y_true.size());
    for (Eigen::Index i = 0; i < y_true.size(); ++i) {
      Vector terms(pred.samples());
      for (int s = 0; s < pred.samples(); ++s) {
        const double mu = pred.mean(i, s) * y_scale + y_shift;
        const double v = pred.y_var(i, s) * s2;
        terms(s) = -0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * (y_true(i) - mu) * (y_true(i) - mu) / v;
      }
      const double top = terms.maxCoeff();
      ll(i) = top + std::log((terms.array() - top).exp().mean());
    }
    return {rmse(y_true, mean), ll.mean()};
  }
  RegressionMetrics out;
  for (int s = 0; s < pred.samples(); ++s) {
    const Vector mean = (pred.mean.col(s).array() * y_scale + y_shift).matrix();
    const Vector var = pred.y_var.col(s) * s2;
    out.rmse += rmse(y_true, mean);
    out.loglik += mean_gaussian_loglik(y_true, mean, var);
  }
  out.rmse /= pred.samples();
  out.loglik /= pred.samples();
  return out;
}

double classification_auc(const Prediction& pred, const Vector& labels, Averaging mode) {
  if (pred.kind != LikelihoodKind::Bernoulli) {
    throw std::invalid_argument("classification_auc: not a classification prediction");
  }
  if (mode == Averaging::Mixture) return auc(labels, pred.prob_avg());
  double total = 0.0;
  for (int s = 0; s < pred.samples(); ++s) total += auc(labels, pred.prob.col(s));
  return total / pred.samples();
}

// ---- checkpoints ----

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) values.push_back(m(i, j));
  }
  return {{"shape", {m.rows(), m.cols()}}, {"values", values}};
}

Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("shape").at(0).get<Eigen::Index>();
  const auto cols = j.at("shape").at(1).get<Eigen::Index>();
  const auto& values = j.at("values");
  if (static_cast<Eigen::Index>(values.size()) != rows * cols) {
    throw std::invalid_argument("checkpoint: matrix value count does not match its shape");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = values.at(static_cast<std::size_t>(i * cols + c)).get<double>();
  }
  return m;
}

namespace {

json kernel_to_json(const KernelParams& p) {
  return {{"log_lengthscales", matrix_to_json(p.log_lengthscales)},
          {"log_signal_variance", matrix_to_json(p.log_signal_variance)}};
}

KernelParams kernel_from_json(const json& j) {
  return {matrix_from_json(j.at("log_lengthscales")), matrix_from_json(j.at("log_signal_variance"))};
}

json gaussian_to_json(const VariationalGaussian& q) {
  json raws = json::array();
  for (const auto& r : q.chol_raw) raws.push_back(matrix_to_json(r));
  return {{"mean", matrix_to_json(q.mean)}, {"chol_raw", raws}, {"whitened", q.whitened}};
}

VariationalGaussian gaussian_from_json(const json& j) {
  VariationalGaussian q;
  q.mean = matrix_from_json(j.at("mean"));
  for (const auto& r : j.at("chol_raw")) q.chol_raw.push_back(matrix_from_json(r));
  q.whitened = j.value("whitened", false);
  return q;
}

json matrices_to_json(const std::vector<Matrix>& ms) {
  json out = json::array();
  for (const auto& m : ms) out.push_back(matrix_to_json(m));
  return out;
}

std::vector<Matrix> matrices_from_json(const json& j) {
  std::vector<Matrix> out;
  for (const auto& m : j) out.push_back(matrix_from_json(m));
  return out;
}

}  // namespace

json checkpoint_json(const DiffGPModel& model, const TrainState& state, const json& config) {
  const InducingField& f = model.field;
  const PredictorGP& g = model.predictor;
  json field = {{"inducing", matrix_to_json(f.inducing)},
                {"inducing_times", f.inducing_times ? matrix_to_json(*f.inducing_times) : json()},
                {"spatial_kernel", kernel_to_json(f.kernel.spatial)},
                {"temporal_kernel", f.kernel.temporal ? kernel_to_json(*f.kernel.temporal) : json()},
                {"q", gaussian_to_json(f.q)}};
  json likelihood = {
      {"kind", g.likelihood.kind == LikelihoodKind::Gaussian ? "gaussian" : "bernoulli"},
      {"log_noise_variance", matrix_to_json(g.likelihood.log_noise_variance)},
      {"n_quad", g.likelihood.n_quad}};
  json predictor = {{"inducing", matrix_to_json(g.inducing)},
                    {"kernel", kernel_to_json(g.kernel)},
                    {"q", gaussian_to_json(g.q)},
                    {"likelihood", likelihood}};
  json flow = {{"flow_time", model.flow.flow_time},
               {"n_steps", model.flow.n_steps},
               {"n_samples", model.flow.n_samples},
               {"seed", model.flow.seed}};
  json optimizer = {{"step", state.adam.step},
                    {"iteration", state.iteration},
                    {"m", matrices_to_json(state.adam.m)},
                    {"v", matrices_to_json(state.adam.v)}};
  return {{"format", "diffgp-checkpoint"}, {"version", 1},      {"field", field},
          {"predictor", predictor},        {"flow", flow},       {"optimizer", optimizer},
          {"config", config}};
}

DiffGPModel model_from_checkpoint(const json& doc, TrainState* state) {
  if (doc.value("format", "") != "diffgp-checkpoint") {
    throw std::invalid_argument("not a diffgp checkpoint");
  }
  DiffGPModel model;
  const json& f = doc.at("field");
  model.field.inducing = matrix_from_json(f.at("inducing"));
  if (!f.at("inducing_times").is_null()) model.field.inducing_times = matrix_from_json(f.at("inducing_times"));
  model.field.kernel.spatial = kernel_from_json(f.at("spatial_kernel"));
  if (!f.at("temporal_kernel").is_null()) model.field.kernel.temporal = kernel_from_json(f.at("temporal_kernel"));
  model.field.q = gaussian_from_json(f.at("q"));

  const json& g = doc.at("predictor");
  model.predictor.inducing = matrix_from_json(g.at("inducing"));
  model.predictor.kernel = kernel_from_json(g.at("kernel"));
  model.predictor.q = gaussian_from_json(g.at("q"));
  const json& lik = g.at("likelihood");
  model.predictor.likelihood.kind =
      lik.at("kind").get<std::string>() == "gaussian" ? LikelihoodKind::Gaussian : LikelihoodKind::Bernoulli;
  model.predictor.likelihood.log_noise_variance = matrix_from_json(lik.at("log_noise_variance"));
  model.predictor.likelihood.n_quad = lik.at("n_quad").get<int>();

  const json& fl = doc.at("flow");
  model.flow = FlowConfig{fl.at("flow_time").get<double>(), fl.at("n_steps").get<int>(),
                          fl.at("n_samples").get<int>(), fl.at("seed").get<std::uint64_t>()};
  model.validate();
  if (state) {
    const json& opt = doc.at("optimizer");
    state->adam.step = opt.at("step").get<long>();
    state->iteration = opt.at("iteration").get<long>();
    state->adam.m = matrices_from_json(opt.at("m"));
    state->adam.v = matrices_from_json(opt.at("v"));
  }
  return model;
}

}  // namespace diffgp
