// SPDX-License-Identifier: Apache-2.0
//
// Computable pieces of the purification distance bounds: Gaussian Hellinger
// distance, Pinsker's bound, the bound constants, and an analytic 1-D check
// of the total-variation bound.

#pragma once

#include <cstddef>
#include <vector>

#include "dpa/diffusion.hpp"

namespace dpa::theory {

struct GaussianSpec {
  std::vector<double> mean;
  std::vector<double> cov;  // row-major d x d

  static GaussianSpec isotropic(std::vector<double> mean, double var);
  std::size_t dim() const { return mean.size(); }
};

/// Squared Hellinger distance between two Gaussians. Throws for singular or
/// non-symmetric covariances.
double hellinger_sq_gaussian(const GaussianSpec& a, const GaussianSpec& b);

/// sqrt(kl / 2).
double tv_pinsker(double kl);

struct BoundInputs {
  diffusion::NoiseSchedule schedule;
  std::size_t t = 1;
  double delta_norm = 0;
  double L_u = 0;
  double eps_re = 0;
  double M = 0;
  double sm_loss = 0;
};

struct Theorem1Terms {
  double C1 = 0;
  double C2 = 0;
  double score_term = 0;  // 0.5 * sqrt(sm_loss + C1)
  double shift_term = 0;  // sqrt(2 - 2 exp(-C2 |delta|^2))
  double bound = 0;
};

Theorem1Terms theorem1_terms(const BoundInputs& b);
double theorem1_bound(const BoundInputs& b);

struct Theorem3Constants {
  double C1 = 0;
  double C2 = 0;
  // lambda_table[i] = lambda(t + 1 + i, t) for k in (t, T].
  std::vector<double> lambda_table;
};

/// Requires 2 <= t <= T.
Theorem3Constants theorem3_constants(const diffusion::NoiseSchedule& s,
                                     std::size_t t);

struct PilotConfig {
  diffusion::NoiseSchedule schedule = diffusion::linear_schedule(50, 1e-3, 5e-2);
  std::vector<double> deltas{0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0};
  std::vector<std::size_t> ts{1, 5, 10, 25, 40, 49};
  double box_radius = 6.0;
  std::size_t quad_points = 20001;
};

struct PilotPoint {
  double delta = 0;
  std::size_t t = 0;
  double lhs = 0;
  double rhs = 0;
  double sm_loss = 0;
  double M = 0;
};

struct PilotReport {
  std::vector<PilotPoint> points;
  std::size_t violations = 0;
};

/// Data law N(0, 1) in one dimension with the exact score, shifted by delta:
/// compares the exact TV between diffused and reconstructed laws with the
/// bound.
PilotReport gaussian_pilot(const PilotConfig& cfg = {});

/// Total variation between two 1-D normals by Simpson quadrature.
double tv_normal_1d(double m1, double v1, double m2, double v2,
                    std::size_t points = 20001);

}  // namespace dpa::theory
