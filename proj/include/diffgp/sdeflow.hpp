#pragma once

// The variational SDE dx = μ_q(x,t) dt + sqrt(Σ_q(x,t)) dW whose drift and
// (diagonal) diffusion are the marginals of the flow GP's variational
// posterior, integrated with Euler–Maruyama.

#include "diffgp/autodiff.hpp"
#include "diffgp/kernels.hpp"
#include "diffgp/svgp.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

namespace diffgp {

struct InducingField {
  Matrix inducing;                       ///< Z_f, M×D spatial inducing states
  std::optional<Matrix> inducing_times;  ///< Z_t, Mt×1 (kept fixed)
  SpatioTemporalKernel kernel;
  VariationalGaussian q;  ///< M (or M·Mt) rows × D columns

  Eigen::Index dims() const { return inducing.cols(); }
  bool temporal() const { return inducing_times.has_value(); }
  Eigen::Index inducing_rows() const;
  void validate() const;
};

struct FieldOptions {
  double lengthscale = 1.0;
  double signal_variance = 0.01;
  double factor_scale = 1e-2;  ///< L_d = factor_scale · chol(K_ZZ)
  int temporal_points = 0;     ///< 0 disables the temporal kernel
  double temporal_lengthscale = 0.0;  ///< 0: spacing of the inducing times
  bool whiten = false;                ///< q in chol(K_ZZ) coordinates, V = factor_scale·I
};

/// Weak-field initialization around the given inducing states; temporal
/// inducing times are spread evenly on [0, flow_time].
InducingField make_field(const Matrix& inducing, double flow_time, const FieldOptions& opts = {});

struct FlowConfig {
  double flow_time = 1.0;
  int n_steps = 20;
  int n_samples = 1;
  std::uint64_t seed = 0;

  /// Number of EM steps actually taken (zero when flow_time == 0).
  int steps_taken() const { return flow_time > 0.0 ? n_steps : 0; }
  double dt() const { return steps_taken() > 0 ? flow_time / n_steps : 0.0; }
  void validate() const;
};

/// Equidistant grid 0 … T inclusive; {0} when T = 0.
std::vector<double> time_grid(const FlowConfig& cfg);

struct FieldMoments {
  ad::Var drift;      ///< N×D
  ad::Var diffusion;  ///< N×D, per-dimension variance
};

class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual FieldMoments at(const ad::Var& x, double t) const = 0;
};

struct FieldVars {
  ad::Var inducing;
  std::optional<ad::Var> inducing_times;
  KernelVars spatial;
  std::optional<KernelVars> temporal;
  GaussianVars q;

  static FieldVars bind(const InducingField& field, ad::Binder& binder);
  static FieldVars constant(const InducingField& field);
};

/// Drift/diffusion of q(f) for one parameter snapshot. The inducing-side
/// factorization is computed once and reused at every query.
class FieldPosterior final : public VectorField {
 public:
  explicit FieldPosterior(FieldVars vars, const JitterPolicy& policy = JitterPolicy::starting_at(1e-6));

  FieldMoments at(const ad::Var& x, double t) const override;
  /// KL[q(U_f) ‖ p(U_f)].
  ad::Var kl() const;
  const InducingPosterior& posterior() const { return post_; }

 private:
  FieldVars vars_;
  InducingPosterior post_;
  ad::Var spatial_chol_inv_;
  ad::Var temporal_chol_inv_;
  ad::Var prior_var_;
};

/// Value-level field marginals at (x, t).
struct FieldValues {
  Matrix drift;
  Matrix diffusion;
};
FieldValues field_posterior(const Matrix& x, double t, const InducingField& field,
                            const JitterPolicy& policy = {});

/// x + drift·Δt + sqrt(diffusion) ⊙ sqrt(Δt) ⊙ noise. Throws NonFiniteState when
/// a coordinate leaves |x| ≤ 1e6 or becomes non-finite.
ad::Var em_step(const ad::Var& x, const FieldMoments& moments, double dt, const Matrix& noise);
Matrix em_step(const Matrix& x, double t, const VectorField& field, double dt, const Matrix& noise);

inline constexpr double kStateBound = 1e6;

/// Standard-normal draws for every step of S paths over N points. Rows
/// [s·N, (s+1)·N) of each step come from the stream derive_seed(seed, s).
struct PathNoise {
  std::vector<Matrix> steps;  ///< steps_taken entries of (S·N)×D
};
PathNoise draw_path_noise(const FlowConfig& cfg, Eigen::Index points, Eigen::Index dims,
                          std::uint64_t seed);
/// The draws of path `sample` alone (rows of that path in draw_path_noise).
PathNoise draw_sample_noise(const FlowConfig& cfg, Eigen::Index points, Eigen::Index dims,
                            std::uint64_t seed, int sample);

/// Differentiable flow of S stacked copies of the inputs ((S·N)×D). When
/// `record` is given, the state at every grid time is appended to it.
ad::Var flow(const VectorField& field, const ad::Var& x0_stacked, const FlowConfig& cfg,
             const PathNoise& noise, std::vector<Matrix>* record = nullptr);

/// S sampled EM paths per input.
struct TrajectoryBatch {
  int samples = 0;
  Eigen::Index points = 0;
  Eigen::Index dims = 0;
  std::vector<double> times;
  std::vector<Matrix> states;  ///< one (S·N)×D block per grid time

  int steps() const { return static_cast<int>(times.size()) - 1; }
  Matrix state(int sample, int step) const;
  Matrix terminal(int sample) const { return state(sample, steps()); }
  const Matrix& terminal_stacked() const { return states.back(); }
};

TrajectoryBatch integrate(const Matrix& x0, const VectorField& field, const FlowConfig& cfg);

/// One row per (sample, step, point): s,k,t_k,x_1…x_D.
void write_trajectory_csv(std::ostream& out, const TrajectoryBatch& batch);

/// Repeats `x` S times vertically.
Matrix stack_samples(const Matrix& x, int samples);

}  // namespace diffgp
