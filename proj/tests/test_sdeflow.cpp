#include "diffgp/errors.hpp"
#include "diffgp/sdeflow.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace diffgp;
using diffgp::testing::gradients_match;
using diffgp::testing::random_lower;
using diffgp::testing::random_matrix;

namespace {

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

/// Spatially constant drift and diffusion.
class ConstantField : public VectorField {
 public:
  ConstantField(RowVector drift, RowVector diffusion)
      : drift_(std::move(drift)), diffusion_(std::move(diffusion)) {}
  FieldMoments at(const ad::Var& x, double) const override {
    return {ad::Var::constant(Matrix(drift_.replicate(x.rows(), 1))),
            ad::Var::constant(Matrix(diffusion_.replicate(x.rows(), 1)))};
  }

 private:
  RowVector drift_, diffusion_;
};

/// μ(x) = −x, Σ = 0.
class LinearDecay : public VectorField {
 public:
  FieldMoments at(const ad::Var& x, double) const override {
    return {ad::neg(x), ad::Var::constant(Matrix::Zero(x.rows(), x.cols()))};
  }
};

InducingField random_field(Eigen::Index m, Eigen::Index d, std::mt19937_64& rng,
                           int temporal_points = 0, double flow_time = 1.0) {
  FieldOptions opts;
  opts.signal_variance = 0.5;
  opts.factor_scale = 0.5;
  opts.temporal_points = temporal_points;
  InducingField f = make_field(random_matrix(m, d, rng), flow_time, opts);
  f.q.mean = random_matrix(f.q.mean.rows(), d, rng, 0.5);
  for (auto& raw : f.q.chol_raw) raw += random_matrix(raw.rows(), raw.cols(), rng, 0.1);
  return f;
}

}  // namespace

TEST(TimeGrid, QuarterSteps) {
  const std::vector<double> g = time_grid({.flow_time = 1.0, .n_steps = 4});
  const std::vector<double> expected{0.0, 0.25, 0.5, 0.75, 1.0};
  EXPECT_EQ(g, expected);
}

TEST(TimeGrid, ZeroFlowTime) {
  EXPECT_EQ(time_grid({.flow_time = 0.0, .n_steps = 20}), std::vector<double>{0.0});
}

TEST(TimeGrid, UniformSpacing) {
  const FlowConfig cfg{.flow_time = 3.7, .n_steps = 20};
  const std::vector<double> g = time_grid(cfg);
  ASSERT_EQ(g.size(), 21u);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_NEAR(g[i] - g[i - 1], cfg.dt(), 1e-15);
  EXPECT_EQ(g.back(), 3.7);
}

TEST(FlowConfig, Validation) {
  EXPECT_THROW(FlowConfig{.flow_time = -1.0}.validate(), std::invalid_argument);
  EXPECT_THROW(FlowConfig{.n_steps = 0}.validate(), std::invalid_argument);
  EXPECT_THROW(FlowConfig{.n_samples = 0}.validate(), std::invalid_argument);
}

TEST(FieldPosterior, PriorFieldHasZeroDriftAndPriorDiffusion) {
  std::mt19937_64 rng(1);
  FieldOptions opts;
  opts.factor_scale = 1.0;
  const InducingField f = make_field(random_matrix(5, 2, rng), 1.0, opts);
  const FieldValues v =
      field_posterior(random_matrix(7, 2, rng), 0.0, f, JitterPolicy::starting_at(1e-6));
  EXPECT_EQ(max_abs(v.drift), 0.0);
  EXPECT_LT(max_abs(v.diffusion.array() - 0.01), 1e-12);
}

TEST(FieldPosterior, InterpolatesAtInducingStates) {
  std::mt19937_64 rng(2);
  InducingField f = make_field(random_matrix(4, 2, rng), 1.0);
  f.q = VariationalGaussian::from_factors(random_matrix(4, 2, rng),
                                          {1e-6 * Matrix::Identity(4, 4), 1e-6 * Matrix::Identity(4, 4)});
  const FieldValues v = field_posterior(f.inducing, 0.0, f, JitterPolicy{{0.0}});
  EXPECT_LT(max_abs(v.drift - f.q.mean), 1e-8);
  EXPECT_LT(max_abs(v.diffusion), 1e-8);
}

TEST(FieldPosterior, MatchesMaterializedBlockSystem) {
  std::mt19937_64 rng(3);
  const InducingField f = random_field(2, 2, rng);
  const Matrix x = random_matrix(1, 2, rng);
  const KernelParams& p = f.kernel.spatial;
  const Matrix kbig = kron(Matrix::Identity(2, 2), kernel_matrix(f.inducing, f.inducing, p));
  const Matrix cross = kron(Matrix::Identity(2, 2), kernel_matrix(x, f.inducing, p));
  Matrix sbig = Matrix::Zero(4, 4);
  sbig.topLeftCorner(2, 2) = f.q.covariance(0);
  sbig.bottomRightCorner(2, 2) = f.q.covariance(1);
  Vector vec_m(4);
  vec_m << f.q.mean.col(0), f.q.mean.col(1);
  const Matrix kinv = kbig.inverse();
  const Vector mean = cross * kinv * vec_m;
  const Matrix cov = p.signal_variance() * Matrix::Identity(2, 2) +
                     cross * kinv * (sbig - kbig) * kinv * cross.transpose();
  const FieldValues v = field_posterior(x, 0.0, f, JitterPolicy{{0.0}});
  for (int d = 0; d < 2; ++d) {
    EXPECT_NEAR(v.drift(0, d), mean(d), 1e-10);
    EXPECT_NEAR(v.diffusion(0, d), cov(d, d), 1e-10);
  }
}

TEST(FieldPosterior, SpatioTemporalMatchesDenseProductKernel) {
  std::mt19937_64 rng(4);
  const InducingField f = random_field(3, 2, rng, 2, 2.0);
  const Matrix x = random_matrix(4, 2, rng);
  const double t = 0.7;
  const Matrix czz = st_kernel_inducing(f.inducing, *f.inducing_times, f.kernel);
  const Matrix cxz = st_kernel_cross(x, t, f.inducing, *f.inducing_times, f.kernel);
  const Matrix kinv = czz.inverse();
  const FieldValues v = field_posterior(x, t, f, JitterPolicy{{0.0}});
  for (int d = 0; d < 2; ++d) {
    const Matrix qm = cxz * kinv;
    const Matrix cov = f.kernel.spatial.signal_variance() * Matrix::Identity(4, 4) +
                       qm * (f.q.covariance(d) - czz) * qm.transpose();
    EXPECT_LT(max_abs(v.drift.col(d) - qm * f.q.mean.col(d)), 1e-10);
    EXPECT_LT(max_abs(v.diffusion.col(d) - Matrix(cov.diagonal())), 1e-10);
  }
}

TEST(FieldPosterior, LongTemporalLengthscaleIsTimeIndependent) {
  std::mt19937_64 rng(5);
  InducingField spatial = random_field(3, 2, rng);
  InducingField st = spatial;
  st.inducing_times = Matrix::Zero(1, 1);
  st.kernel.temporal = KernelParams::make(1, 1e6, 1.0);
  const Matrix x = random_matrix(5, 2, rng);
  const FieldValues a = field_posterior(x, 0.0, spatial, JitterPolicy{{0.0}});
  for (double t : {0.0, 1.0}) {
    const FieldValues b = field_posterior(x, t, st, JitterPolicy{{0.0}});
    EXPECT_LT(max_abs(a.drift - b.drift), 1e-10);
    EXPECT_LT(max_abs(a.diffusion - b.diffusion), 1e-10);
  }
}

TEST(MakeField, ShapesAndTemporalTimes) {
  std::mt19937_64 rng(6);
  const InducingField f = make_field(random_matrix(4, 3, rng), 5.0, {.temporal_points = 3});
  EXPECT_NO_THROW(f.validate());
  EXPECT_EQ(f.inducing_rows(), 12);
  EXPECT_EQ(f.q.mean.rows(), 12);
  EXPECT_EQ(f.q.mean.cols(), 3);
  EXPECT_DOUBLE_EQ((*f.inducing_times)(0, 0), 0.0);
  EXPECT_DOUBLE_EQ((*f.inducing_times)(1, 0), 2.5);
  EXPECT_DOUBLE_EQ((*f.inducing_times)(2, 0), 5.0);
}

TEST(EmStep, ZeroFieldLeavesStateUnchanged) {
  std::mt19937_64 rng(7);
  const Matrix x = random_matrix(3, 2, rng);
  const ConstantField field(RowVector::Zero(2), RowVector::Zero(2));
  EXPECT_EQ(em_step(x, 0.0, field, 0.1, random_matrix(3, 2, rng)), x);
}

TEST(EmStep, DeterministicEuler) {
  std::mt19937_64 rng(8);
  const Matrix x = random_matrix(3, 2, rng);
  RowVector c(2);
  c << 0.5, -1.5;
  const ConstantField field(c, RowVector::Zero(2));
  const Matrix next = em_step(x, 0.0, field, 0.1, random_matrix(3, 2, rng));
  EXPECT_LT(max_abs(next - (x.rowwise() + 0.1 * c)), 1e-15);
}

TEST(EmStep, IncrementMomentsMatchGaussianLaw) {
  const Eigen::Index n = 100'000;
  const double dt = 0.05;
  RowVector mu(2), sigma2(2);
  mu << 0.8, -0.3;
  sigma2 << 0.4, 1.7;
  const ConstantField field(mu, sigma2);
  const FlowConfig cfg{.flow_time = dt, .n_steps = 1, .seed = 42};
  const PathNoise noise = draw_path_noise(cfg, n, 2, cfg.seed);
  const Matrix x0 = Matrix::Zero(n, 2);
  const Matrix inc = em_step(x0, 0.0, field, dt, noise.steps[0]) - x0;
  for (int d = 0; d < 2; ++d) {
    const Vector col = inc.col(d);
    const double mean = col.mean();
    const Vector c = col.array() - mean;
    const double var = c.squaredNorm() / n;
    const double m4 = c.array().pow(4).mean();
    EXPECT_LE(std::abs(mean - mu(d) * dt), 3.0 * std::sqrt(var / n));
    EXPECT_LE(std::abs(var - sigma2(d) * dt), 3.0 * std::sqrt((m4 - var * var) / n));
  }
}

TEST(EmStep, ExplodingStateThrows) {
  const ConstantField field(RowVector::Constant(1, 1e9), RowVector::Zero(1));
  EXPECT_THROW(em_step(Matrix::Zero(1, 1), 0.0, field, 0.1, Matrix::Zero(1, 1)), NonFiniteState);
}

TEST(Integrate, ZeroFlowTimeKeepsInputs) {
  std::mt19937_64 rng(9);
  const Matrix x0 = random_matrix(6, 2, rng);
  const InducingField f = random_field(3, 2, rng);
  const TrajectoryBatch b = integrate(x0, FieldPosterior(FieldVars::constant(f)),
                                      {.flow_time = 0.0, .n_steps = 20, .n_samples = 3});
  EXPECT_EQ(b.times, std::vector<double>{0.0});
  ASSERT_EQ(b.states.size(), 1u);
  for (int s = 0; s < 3; ++s) EXPECT_EQ(b.terminal(s), x0);
}

TEST(Integrate, NegligibleFieldIsNearIdentity) {
  std::mt19937_64 rng(10);
  const Matrix x0 = random_matrix(6, 2, rng);
  const InducingField f = make_field(random_matrix(4, 2, rng), 1.0, {.signal_variance = 1e-12});
  const TrajectoryBatch b = integrate(x0, FieldPosterior(FieldVars::constant(f)),
                                      {.flow_time = 1.0, .n_steps = 20, .n_samples = 2, .seed = 3});
  for (int s = 0; s < 2; ++s) EXPECT_LT(max_abs(b.terminal(s) - x0), 1e-4);
}

TEST(Integrate, LinearDriftFollowsEulerRecursion) {
  std::mt19937_64 rng(11);
  const Matrix x0 = random_matrix(4, 1, rng);
  const FlowConfig cfg{.flow_time = 1.3, .n_steps = 13};
  const TrajectoryBatch b = integrate(x0, LinearDecay{}, cfg);
  EXPECT_LT(max_abs(b.terminal(0) - x0 * std::pow(1.0 - cfg.dt(), cfg.n_steps)), 1e-12);
  EXPECT_EQ(b.state(0, 0), x0);
}

TEST(Integrate, DeterministicUnderSeed) {
  std::mt19937_64 rng(12);
  const Matrix x0 = random_matrix(8, 2, rng);
  const InducingField f = random_field(4, 2, rng);
  const FieldPosterior fp(FieldVars::constant(f));
  const FlowConfig cfg{.flow_time = 1.0, .n_steps = 10, .n_samples = 3, .seed = 99};
  const TrajectoryBatch a = integrate(x0, fp, cfg);
  const TrajectoryBatch b = integrate(x0, fp, cfg);
  for (std::size_t k = 0; k < a.states.size(); ++k) EXPECT_TRUE(a.states[k] == b.states[k]);
  // Paths are distinct across samples.
  EXPECT_GT(max_abs(a.terminal(0) - a.terminal(1)), 0.0);
}

TEST(PathNoise, PerSampleStreamsIndependentOfSampleCount) {
  const PathNoise two = draw_path_noise({.flow_time = 1.0, .n_steps = 4, .n_samples = 2}, 5, 3, 7);
  const PathNoise four = draw_path_noise({.flow_time = 1.0, .n_steps = 4, .n_samples = 4}, 5, 3, 7);
  for (int k = 0; k < 4; ++k) {
    EXPECT_TRUE(two.steps[k].middleRows(5, 5) == four.steps[k].middleRows(5, 5));
  }
}

TEST(Integrate, TrajectoriesDoNotCollapse) {
  std::mt19937_64 rng(13);
  const Matrix x0 = random_matrix(50, 2, rng);
  FieldOptions opts;
  opts.signal_variance = 0.05;
  InducingField f = make_field(random_matrix(10, 2, rng), 2.0, opts);
  f.q.mean = random_matrix(10, 2, rng, 0.2);
  const TrajectoryBatch b =
      integrate(x0, FieldPosterior(FieldVars::constant(f)), {.flow_time = 2.0, .seed = 5});
  const Matrix xt = b.terminal(0);
  double min_dist = INFINITY;
  for (int i = 0; i < 50; ++i) {
    for (int j = i + 1; j < 50; ++j) min_dist = std::min(min_dist, (xt.row(i) - xt.row(j)).norm());
  }
  EXPECT_GT(min_dist, 0.0);
  const Matrix c = xt.rowwise() - xt.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(c.transpose() * c / 50.0);
  EXPECT_LT(eig.eigenvalues().maxCoeff() / eig.eigenvalues().minCoeff(), 1e6);
}

TEST(TrajectoryCsv, ShapeAndMonotoneTime) {
  std::mt19937_64 rng(14);
  const Matrix x0 = random_matrix(3, 2, rng);
  const TrajectoryBatch b = integrate(x0, FieldPosterior(FieldVars::constant(random_field(3, 2, rng))),
                                      {.flow_time = 1.0, .n_steps = 4, .n_samples = 2});
  std::ostringstream out;
  write_trajectory_csv(out, b);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "s,k,t,x1,x2");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, (4 + 1) * 3 * 2);
}

class FlowGradient : public ::testing::TestWithParam<int> {
 protected:
  std::mt19937_64 rng{static_cast<std::uint64_t>(400 + GetParam())};
};

TEST_P(FlowGradient, PathwiseGradientOfTerminalState) {
  const bool temporal = GetParam() % 2 == 1;
  const InducingField f = random_field(3, 2, rng, temporal ? 2 : 0, 0.6);
  const Matrix x0 = random_matrix(3, 2, rng);
  const Matrix w = random_matrix(6, 2, rng);
  const FlowConfig cfg{.flow_time = 0.6, .n_steps = 3, .n_samples = 2, .seed = 17};
  const PathNoise noise = draw_path_noise(cfg, 3, 2, cfg.seed);

  std::vector<Matrix> params{f.inducing, f.kernel.spatial.log_lengthscales,
                             f.kernel.spatial.log_signal_variance, f.q.mean, f.q.chol_raw[0],
                             f.q.chol_raw[1], x0};
  if (temporal) params.push_back(f.kernel.temporal->log_lengthscales);
  auto loss = [&](const std::vector<ad::Var>& v) {
    FieldVars fv;
    fv.inducing = v[0];
    fv.spatial = {v[1], v[2]};
    fv.q = {v[3], {v[4], v[5]}};
    if (temporal) {
      fv.inducing_times = ad::Var::constant(*f.inducing_times);
      fv.temporal = KernelVars{v[7], ad::Var::constant(f.kernel.temporal->log_signal_variance)};
    }
    const FieldPosterior fp(fv);
    ad::Var xt = flow(fp, ad::vcat({v[6], v[6]}), cfg, noise);
    return ad::add(ad::sum(ad::mul(xt, ad::Var::constant(w))), fp.kl());
  };
  EXPECT_TRUE(gradients_match(params, loss));
}

INSTANTIATE_TEST_SUITE_P(Random, FlowGradient, ::testing::Range(0, 10));
