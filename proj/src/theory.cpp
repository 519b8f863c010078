// SPDX-License-Identifier: Apache-2.0

#include "dpa/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dpa::theory {

namespace {

Eigen::MatrixXd cov_matrix(const GaussianSpec& g) {
  const auto d = static_cast<Eigen::Index>(g.dim());
  if (d == 0 || g.cov.size() != g.dim() * g.dim()) {
    throw std::invalid_argument("gaussian: covariance must be d x d with d >= 1");
  }
  Eigen::MatrixXd m(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g.cov[i * d + j];
  }
  if (!m.isApprox(m.transpose(), 1e-12)) {
    throw std::invalid_argument("gaussian: covariance is not symmetric");
  }
  return m;
}

// log det of an SPD matrix via Cholesky.
double log_det_spd(const Eigen::MatrixXd& m, Eigen::LLT<Eigen::MatrixXd>& llt) {
  llt.compute(m);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("gaussian: covariance is singular or not positive definite");
  }
  double ld = 0;
  const Eigen::MatrixXd& l = llt.matrixL();
  for (Eigen::Index i = 0; i < m.rows(); ++i) ld += 2.0 * std::log(l(i, i));
  return ld;
}

}  // namespace

GaussianSpec GaussianSpec::isotropic(std::vector<double> mean, double var) {
  GaussianSpec g;
  const std::size_t d = mean.size();
  g.mean = std::move(mean);
  g.cov.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) g.cov[i * d + i] = var;
  return g;
}

double hellinger_sq_gaussian(const GaussianSpec& a, const GaussianSpec& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("hellinger: dimension mismatch");
  Eigen::MatrixXd s1 = cov_matrix(a), s2 = cov_matrix(b);
  Eigen::MatrixXd avg = 0.5 * (s1 + s2);
  Eigen::LLT<Eigen::MatrixXd> l1, l2, la;
  const double ld1 = log_det_spd(s1, l1);
  const double ld2 = log_det_spd(s2, l2);
  const double lda = log_det_spd(avg, la);
  Eigen::VectorXd diff(static_cast<Eigen::Index>(a.dim()));
  for (std::size_t i = 0; i < a.dim(); ++i) diff(i) = a.mean[i] - b.mean[i];
  const double quad = diff.dot(la.solve(diff));
  const double log_coef = 0.25 * ld1 + 0.25 * ld2 - 0.5 * lda;
  return std::clamp(1.0 - std::exp(log_coef - quad / 8.0), 0.0, 1.0);
}

double tv_pinsker(double kl) {
  if (kl < 0) throw std::invalid_argument("tv_pinsker: KL must be >= 0");
  return std::sqrt(kl / 2.0);
}

Theorem1Terms theorem1_terms(const BoundInputs& b) {
  const auto& s = b.schedule;
  if (b.t == 0) {
    throw std::invalid_argument(
        "theorem1_bound: t = 0 makes C2 singular (alpha_bar_0 = 1)");
  }
  if (b.t > s.T()) throw std::out_of_range("theorem1_bound: t exceeds T");
  for (double v : {b.delta_norm, b.L_u, b.eps_re, b.M, b.sm_loss}) {
    if (v < 0) throw std::invalid_argument("theorem1_bound: inputs must be >= 0");
  }
  double beta_sum = 0;
  for (std::size_t k = b.t + 1; k <= s.T(); ++k) beta_sum += s.beta(k);
  Theorem1Terms r;
  r.C1 = (b.L_u + 8.0 * b.M * b.M) * beta_sum;
  r.C2 = 1.0 / (8.0 * (1.0 - s.alpha_bar(b.t)));
  r.score_term = 0.5 * std::sqrt(b.sm_loss + r.C1);
  r.shift_term =
      std::sqrt(2.0 - 2.0 * std::exp(-r.C2 * b.delta_norm * b.delta_norm));
  r.bound = r.score_term + r.shift_term + b.eps_re;
  return r;
}

double theorem1_bound(const BoundInputs& b) { return theorem1_terms(b).bound; }

Theorem3Constants theorem3_constants(const diffusion::NoiseSchedule& s,
                                     std::size_t t) {
  if (t < 2) {
    throw std::invalid_argument(
        "theorem3_constants: t < 2 makes C2 singular (1 - alpha_bar_0 = 0)");
  }
  if (t > s.T()) throw std::out_of_range("theorem3_constants: t exceeds T");
  Theorem3Constants c;
  double prod = 1.0;
  for (std::size_t k = t + 1; k <= s.T(); ++k) prod *= std::sqrt(s.alpha_bar(k));
  c.C1 = prod * std::sqrt(s.alpha_bar(s.T()));
  c.C2 = (1.0 - s.alpha_bar(t)) /
         (8.0 * (1.0 - s.alpha_bar(t - 1)) * s.beta(t));
  double inner = 1.0;  // product of sqrt(alpha_bar_i) for i in (t, k)
  for (std::size_t k = t + 1; k <= s.T(); ++k) {
    c.lambda_table.push_back(s.beta(k) * inner / std::sqrt(1.0 - s.alpha_bar(k)));
    inner *= std::sqrt(s.alpha_bar(k));
  }
  return c;
}

double tv_normal_1d(double m1, double v1, double m2, double v2,
                    std::size_t points) {
  if (!(v1 > 0 && v2 > 0)) throw std::invalid_argument("tv_normal_1d: variance <= 0");
  if (points < 3) points = 3;
  if (points % 2 == 0) ++points;
  const double s = std::sqrt(std::max(v1, v2));
  const double lo = std::min(m1, m2) - 12.0 * s;
  const double hi = std::max(m1, m2) + 12.0 * s;
  const double h = (hi - lo) / static_cast<double>(points - 1);
  auto pdf = [](double x, double m, double v) {
    return std::exp(-(x - m) * (x - m) / (2 * v)) / std::sqrt(2 * M_PI * v);
  };
  double acc = 0;
  for (std::size_t i = 0; i < points; ++i) {
    double x = lo + h * static_cast<double>(i);
    double f = std::abs(pdf(x, m1, v1) - pdf(x, m2, v2));
    double w = (i == 0 || i == points - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    acc += w * f;
  }
  return 0.5 * acc * h / 3.0;
}

PilotReport gaussian_pilot(const PilotConfig& cfg) {
  const auto& s = cfg.schedule;
  const std::size_t T = s.T();
  PilotReport rep;
  for (std::size_t t : cfg.ts) {
    if (t < 1 || t >= T) {
      throw std::invalid_argument("gaussian_pilot: t must lie in [1, T)");
    }
  }
  const double abT = s.alpha_bar(T);
  // Mean of the reconstruction at step k when the reverse pass starts from
  // the diffused shifted law; the exact score keeps the variance at 1.
  auto recon_mean = [&](double delta, std::size_t k) {
    return delta * std::sqrt(abT) * std::sqrt(abT / s.alpha_bar(k));
  };
  for (double delta : cfg.deltas) {
    for (std::size_t t : cfg.ts) {
      PilotPoint p;
      p.delta = delta;
      p.t = t;
      const double m_fwd = std::sqrt(s.alpha_bar(t)) * delta;
      p.lhs = tv_normal_1d(m_fwd, 1.0, recon_mean(delta, t), 1.0, cfg.quad_points);
      // The exact score -x differs from grad log q'_k by the constant m'_k.
      double acc = 0;
      for (std::size_t k = t + 1; k <= T; ++k) {
        double m = recon_mean(delta, k);
        acc += m * m;
      }
      p.sm_loss = acc / static_cast<double>(T - t);
      // Scores -x and -(x - sqrt(ab_t) delta) over the box [-R, R].
      p.M = cfg.box_radius + std::sqrt(s.alpha_bar(t)) * std::abs(delta);
      BoundInputs b;
      b.schedule = s;
      b.t = t;
      b.delta_norm = std::abs(delta);
      b.M = p.M;
      b.sm_loss = p.sm_loss;
      p.rhs = theorem1_bound(b);
      if (p.lhs > p.rhs) ++rep.violations;
      rep.points.push_back(p);
    }
  }
  return rep;
}

}  // namespace dpa::theory
