#pragma once

#include "diffgp/autodiff.hpp"
#include "diffgp/sdeflow.hpp"
#include "diffgp/svgp.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace diffgp {

/// Flow field f, predictor g and the flow discretization.
struct DiffGPModel {
  InducingField field;
  PredictorGP predictor;
  FlowConfig flow;  ///< n_samples is the training path count

  Eigen::Index dims() const { return field.dims(); }
  void validate() const;
};

struct ModelOptions {
  Eigen::Index inducing = 100;  ///< M, shared by f and g
  int temporal_points = 0;      ///< Mt; 0 disables the temporal kernel
  double flow_time = 1.0;
  int n_steps = 20;
  int train_samples = 1;
  LikelihoodKind likelihood = LikelihoodKind::Gaussian;
  double noise_variance = 0.1;
  double field_variance = 0.01;
  int kmeans_iters = 10;
  bool whiten = true;  ///< whitened q(u) for both GPs
  std::uint64_t seed = 0;
};

/// k-means centroids (k-means++ seeding, then Lloyd iterations). When k ≥ N
/// the inputs themselves are returned.
Matrix kmeans(const Matrix& x, Eigen::Index k, int iters, std::uint64_t seed);

/// Z_f = Z_g = k-means centroids of x; weak field; prior-scaled predictor.
DiffGPModel initialize_model(const Matrix& x, const ModelOptions& opts);

enum class ParamGroup {
  FieldInducing,
  FieldKernel,
  FieldMean,
  FieldCovariance,
  PredictorInducing,
  PredictorKernel,
  PredictorMean,
  PredictorCovariance,
  NoiseVariance,
};
std::string to_string(ParamGroup g);

struct ParameterRef {
  std::string name;
  ParamGroup group;
  Matrix* value;
};

/// Trainable parameter matrices, in a fixed order. The temporal signal
/// variance and the temporal inducing times are not trainable.
std::vector<ParameterRef> parameter_refs(DiffGPModel& model, bool field = true,
                                         bool predictor = true);

struct ModelVars {
  FieldVars field;
  ad::Var predictor_inducing;
  KernelVars predictor_kernel;
  GaussianVars predictor_q;
  ad::Var log_noise_variance;
};

using LeafMap = std::unordered_map<const Matrix*, ad::Var>;

/// Graph inputs for every model matrix: the leaf in `leaves` when present,
/// otherwise a constant.
ModelVars model_vars(const DiffGPModel& model, const LeafMap& leaves = {});

struct ElboTerms {
  double expected_loglik = 0.0;  ///< scaled and sample-averaged
  double kl_predictor = 0.0;
  double kl_field = 0.0;
  double total = 0.0;
};

/// scale·(1/S)Σ_s Σ_i E[log p(y_i | g(x_iT^(s)))] − KL_g − KL_f, with the S paths
/// driven by `noise` ((S·B)×D per step, S = model.flow.n_samples).
ad::Var elbo(const DiffGPModel& model, const ModelVars& vars, const Matrix& xb, const Vector& yb,
             double scale, const PathNoise& noise, ElboTerms* terms = nullptr);

/// Flow-free objective: scale·Σ_i E[log p(y_i | g(x_i))] − KL_g.
ad::Var svgp_elbo(const DiffGPModel& model, const ModelVars& vars, const Matrix& xb,
                  const Vector& yb, double scale, ElboTerms* terms = nullptr);

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam descent step on `params` (minimization).
void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               AdamState& state, const AdamConfig& cfg = {});

struct TrainConfig {
  double learning_rate = 0.01;
  int n_iters = 10000;
  int minibatch_size = 0;  ///< 0: 512 when N > 2000, else the full batch
  int eval_every = 100;
  int warmstart_iters = 5000;
  std::uint64_t seed = 0;
  bool train_field = true;

  int batch_size(Eigen::Index n) const;
  void validate(Eigen::Index n) const;
};

struct TracePoint {
  std::string phase;
  long iteration = 0;
  double elbo = 0.0;
  double wall_seconds = 0.0;

  bool operator==(const TracePoint&) const = default;
};

enum class FitStatus { Completed, Aborted };

struct FitResult {
  std::vector<TracePoint> trace;
  FitStatus status = FitStatus::Completed;
  std::string message;
  long iterations = 0;
};

/// Optimizer state carried across calls (and through checkpoints).
struct TrainState {
  AdamState adam;
  long iteration = 0;
};

/// Trains the predictor alone against the flow-free objective for
/// cfg.warmstart_iters steps; the field is left untouched.
FitResult warmstart_sgp(DiffGPModel& model, const Matrix& x, const Vector& y,
                        const TrainConfig& cfg);

/// Joint training of all parameters for cfg.n_iters steps. Numeric failures
/// stop the run with status Aborted, leaving the last finite parameters.
FitResult fit(DiffGPModel& model, const Matrix& x, const Vector& y, const TrainConfig& cfg,
              TrainState* state = nullptr);

/// Per-path predictive moments on the standardized scale; column s is path s.
struct Prediction {
  LikelihoodKind kind = LikelihoodKind::Gaussian;
  Matrix mean;   ///< latent g mean
  Matrix var;    ///< latent g variance
  Matrix y_var;  ///< var + σ_n² (regression)
  Matrix prob;   ///< p(y = +1) (classification)

  int samples() const { return static_cast<int>(mean.cols()); }
  Vector mean_avg() const;
  /// Variance of the equally weighted mixture over paths.
  Vector y_var_mixture() const;
  Vector prob_avg() const;
};

Prediction predict(const DiffGPModel& model, const Matrix& x, int samples, std::uint64_t seed);

// ---- metrics ----

double rmse(const Vector& y, const Vector& pred);
/// Mean of log N(y_i | mean_i, var_i).
double mean_gaussian_loglik(const Vector& y, const Vector& mean, const Vector& var);
/// Area under the ROC curve by the rank statistic with tie midranks; labels
/// are positive when > 0.
double auc(const Vector& labels, const Vector& scores);

enum class Averaging { PerSample, Mixture };

struct RegressionMetrics {
  double rmse = 0.0;
  double loglik = 0.0;
};

/// Metrics in original units given y = y_std·scale + shift.
RegressionMetrics regression_metrics(const Prediction& pred, const Vector& y_true, double y_shift,
                                     double y_scale, Averaging mode = Averaging::PerSample);
double classification_auc(const Prediction& pred, const Vector& labels,
                          Averaging mode = Averaging::PerSample);

// ---- checkpoints ----

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// All parameters, flow settings, optimizer state and `config` in one document.
nlohmann::json checkpoint_json(const DiffGPModel& model, const TrainState& state,
                               const nlohmann::json& config = nlohmann::json::object());
DiffGPModel model_from_checkpoint(const nlohmann::json& doc, TrainState* state = nullptr);

}  // namespace diffgp
