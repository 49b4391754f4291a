#pragma once

#include "diffgp/autodiff.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace diffgp::testing {

using LossFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct GradCheck {
  double step = 1e-5;
  double rel = 1e-4;
  double abs = 1e-7;
};

inline bool grad_close(double analytic, double numeric, const GradCheck& tol) {
  const double err = std::abs(analytic - numeric);
  return err <= std::max(tol.abs, tol.rel * std::max(std::abs(analytic), std::abs(numeric)));
}

/// Compares reverse-mode gradients of `loss` against central differences.
inline ::testing::AssertionResult gradients_match(const std::vector<Matrix>& params,
                                                  const LossFn& loss, GradCheck tol = {}) {
  std::vector<ad::Var> vars;
  for (const auto& p : params) vars.push_back(ad::Var::parameter(p));
  ad::backward(loss(vars));

  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix analytic = vars[k].grad();
    for (Eigen::Index i = 0; i < params[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<ad::Var> c;
        for (std::size_t j = 0; j < params.size(); ++j) {
          Matrix v = params[j];
          if (j == k) v.data()[i] += delta;
          c.push_back(ad::Var::constant(v));
        }
        return loss(c).item();
      };
      const double numeric = (eval(tol.step) - eval(-tol.step)) / (2.0 * tol.step);
      if (!grad_close(analytic.data()[i], numeric, tol)) {
        return ::testing::AssertionFailure()
               << "param " << k << " entry " << i << ": analytic " << analytic.data()[i]
               << " vs numeric " << numeric;
      }
    }
  }
  return ::testing::AssertionSuccess();
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng,
                            double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

inline Matrix random_spd(Eigen::Index n, std::mt19937_64& rng) {
  Matrix a = random_matrix(n, n, rng);
  return a * a.transpose() + static_cast<double>(n) * Matrix::Identity(n, n);
}

inline Matrix random_lower(Eigen::Index n, std::mt19937_64& rng) {
  Matrix l = random_matrix(n, n, rng, 0.3).triangularView<Eigen::Lower>();
  l.diagonal().array() = l.diagonal().array().abs() + 1.0;
  return l;
}

}  // namespace diffgp::testing
