#pragma once

// Self-contained verification routines shared by `diffgp check` and the
// acceptance binary. Each compares the library against an independently
// coded oracle.

#include <string>
#include <vector>

namespace diffgp::checks {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// "PASS [id] name: detail (x.x s)"
std::string format_line(const CheckResult& r);

/// ELBO gradients of random 10-point models (D=2, M=4, T=0.5, 5 steps) against
/// central differences, every parameter group.
CheckResult gradient_correctness();
/// T=0 ELBO against a dense-matrix SVGP ELBO.
CheckResult zero_flow_reduction();
/// Euler–Maruyama increments of a constant field: moments over 1e5 draws.
CheckResult em_increment_law();
/// Gaussian KL against 1e6-sample Monte Carlo estimates.
CheckResult kl_oracle();
/// Spatio-temporal cross covariance against the explicit product kernel.
CheckResult kronecker_equivalence();

std::vector<CheckResult> run_fast_checks();

}  // namespace diffgp::checks
