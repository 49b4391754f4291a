#include "diffgp/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace diffgp {

KernelParams KernelParams::make(Eigen::Index dims, double lengthscale, double variance) {
  if (dims < 1 || lengthscale <= 0.0 || variance <= 0.0) {
    throw std::invalid_argument("KernelParams::make: invalid arguments");
  }
  KernelParams p;
  p.log_lengthscales = Matrix::Constant(1, dims, std::log(lengthscale));
  p.log_signal_variance = Matrix::Constant(1, 1, std::log(variance));
  return p;
}

double KernelParams::signal_variance() const { return std::exp(log_signal_variance(0, 0)); }

RowVector KernelParams::lengthscales() const { return log_lengthscales.array().exp(); }

double rbf_ard(const RowVector& x, const RowVector& xp, const KernelParams& p) {
  if (x.size() != p.dims() || xp.size() != p.dims()) {
    throw std::invalid_argument("rbf_ard: dimension mismatch");
  }
  const double r2 = ((x - xp).array() / p.lengthscales().array()).square().sum();
  return p.signal_variance() * std::exp(-0.5 * r2);
}

namespace {

// Scaled squared distances, clamped at zero against cancellation.
Matrix scaled_sqdist(const Matrix& xs, const Matrix& zs) {
  Matrix d2 = -2.0 * xs * zs.transpose();
  d2.colwise() += xs.rowwise().squaredNorm();
  d2.rowwise() += zs.rowwise().squaredNorm().transpose();
  return d2.cwiseMax(0.0);
}

}  // namespace

Matrix kernel_matrix(const Matrix& x, const Matrix& xp, const KernelParams& p) {
  if (x.cols() != p.dims() || xp.cols() != p.dims()) {
    throw std::invalid_argument("kernel_matrix: dimension mismatch");
  }
  const RowVector inv_ls = (-p.log_lengthscales.array()).exp();
  Matrix xs = x.array().rowwise() * inv_ls.array();
  Matrix zs = xp.array().rowwise() * inv_ls.array();
  return p.signal_variance() * (-0.5 * scaled_sqdist(xs, zs).array()).exp().matrix();
}

KernelVars KernelVars::bind(const KernelParams& p, ad::Binder& binder) {
  return {binder.bind(p.log_lengthscales), binder.bind(p.log_signal_variance)};
}

KernelVars KernelVars::constant(const KernelParams& p) {
  return {ad::Var::constant(p.log_lengthscales), ad::Var::constant(p.log_signal_variance)};
}

ad::Var kernel_matrix(const ad::Var& x, const ad::Var& xp, const KernelVars& p) {
  const Eigen::Index dims = p.log_lengthscales.cols();
  if (x.cols() != dims || xp.cols() != dims) {
    throw std::invalid_argument("kernel_matrix: dimension mismatch");
  }
  const RowVector inv_ls2 = (-2.0 * p.log_lengthscales.value().array()).exp();
  const RowVector inv_ls = inv_ls2.array().sqrt();
  const double variance = std::exp(p.log_signal_variance.item());
  const Matrix& xv = x.value();
  const Matrix& zv = xp.value();
  Matrix k = variance * (-0.5 * scaled_sqdist(xv.array().rowwise() * inv_ls.array(),
                                             zv.array().rowwise() * inv_ls.array())
                                    .array())
                            .exp()
                            .matrix();
  return ad::make_op(
      "rbf_ard", k, {x, xp, p.log_lengthscales, p.log_signal_variance},
      [k, xv, zv, inv_ls2](const Matrix& g, std::span<const ad::NodePtr> parents) {
        const Matrix gk = g.cwiseProduct(k);
        const Vector rs = gk.rowwise().sum();
        const RowVector cs = gk.colwise().sum();
        const Matrix gkz = gk * zv;  // N×D
        if (parents[0]->requires_grad) {
          Matrix gx = gkz - (xv.array().colwise() * rs.array()).matrix();
          ad::accumulate(parents[0], (gx.array().rowwise() * inv_ls2.array()).matrix());
        }
        if (parents[1]->requires_grad) {
          Matrix gz = gk.transpose() * xv - (zv.array().colwise() * cs.transpose().array()).matrix();
          ad::accumulate(parents[1], (gz.array().rowwise() * inv_ls2.array()).matrix());
        }
        if (parents[2]->requires_grad) {
          RowVector acc = (xv.array().square().colwise() * rs.array()).colwise().sum();
          acc += (zv.array().square().colwise() * cs.transpose().array()).colwise().sum().matrix();
          acc -= 2.0 * xv.cwiseProduct(gkz).colwise().sum();
          ad::accumulate(parents[2], Matrix(acc.cwiseProduct(inv_ls2)));
        }
        ad::accumulate(parents[3], Matrix::Constant(1, 1, gk.sum()));
      });
}

Matrix FieldKernelBlocks::materialized_inducing() const {
  return kron(Matrix::Identity(outputs, outputs), inducing);
}

Matrix FieldKernelBlocks::materialized_cross() const {
  return kron(Matrix::Identity(outputs, outputs), cross);
}

FieldKernelBlocks field_kernel_blocks(const Matrix& x, const Matrix& z, const KernelParams& p,
                                      Eigen::Index outputs) {
  return {kernel_matrix(x, z, p), kernel_matrix(z, z, p), outputs};
}

namespace {

const KernelParams& require_temporal(const SpatioTemporalKernel& k) {
  if (!k.temporal) throw std::invalid_argument("spatio-temporal kernel without temporal part");
  return *k.temporal;
}

}  // namespace

Matrix st_kernel_cross(const Matrix& x, double t, const Matrix& zs, const Matrix& zt,
                       const SpatioTemporalKernel& k) {
  const KernelParams& kt = require_temporal(k);
  return row_kron(kernel_matrix(x, zs, k.spatial),
                  kernel_matrix(Matrix::Constant(1, 1, t), zt, kt));
}

Matrix st_kernel_inducing(const Matrix& zs, const Matrix& zt, const SpatioTemporalKernel& k) {
  const KernelParams& kt = require_temporal(k);
  return kron(kernel_matrix(zs, zs, k.spatial), kernel_matrix(zt, zt, kt));
}

ad::Var st_kernel_cross(const ad::Var& x, double t, const ad::Var& zs, const ad::Var& zt,
                        const KernelVars& spatial, const KernelVars& temporal) {
  ad::Var kt = kernel_matrix(ad::Var::constant(t), zt, temporal);
  return ad::row_kron(kernel_matrix(x, zs, spatial), kt);
}

}  // namespace diffgp
