// SPDX-License-Identifier: Apache-2.0
//
// Noise schedules, DDPM and VP-SDE steps, the two training losses and the
// purification operator.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dpa/ad.hpp"
#include "dpa/chain.hpp"
#include "dpa/models.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa::diffusion {

/// beta/alpha/alpha_bar/sigma tables for t = 1..T, with alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> betas);

  std::size_t T() const { return betas_.size(); }
  double beta(std::size_t t) const;
  double alpha(std::size_t t) const;
  double alpha_bar(std::size_t t) const;  // t in [0, T]
  double sigma(std::size_t t) const;
  const std::vector<double>& betas() const { return betas_; }

  // Continuous VP-SDE view on t in [0, 1]: beta(t) = T * lerp(b_1, b_T, t),
  // alpha_bar(t) = exp(-integral of beta over [0, t]).
  double beta_continuous(double t) const;
  double alpha_bar_continuous(double t) const;

 private:
  void check_step(std::size_t t, std::size_t lo) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;  // index 0 holds 1
  std::vector<double> sigmas_;      // index 0 unused
};

NoiseSchedule linear_schedule(std::size_t T, double beta_min, double beta_max);

/// Noise predictor with one network time per row of x.
using EpsFn =
    std::function<ad::Var(ad::Tape&, ad::Var x, std::span<const double> t_rows)>;
/// Score in continuous time t in [0, 1].
using ScoreFn = std::function<ad::Var(ad::Tape&, ad::Var x, double t)>;

EpsFn eps_from_params(const models::MlpParams& p);
/// s(x, t) = -eps(x, t * time_scale) / sqrt(1 - alpha_bar(t)).
ScoreFn score_from_eps(EpsFn eps, const NoiseSchedule& s, double time_scale);

Tensor diffuse_closed_form(const Tensor& x0, std::size_t t, const Tensor& eps,
                           const NoiseSchedule& s);

/// One forward Markov step x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z.
ad::Var ddpm_forward_step(ad::Var x, std::size_t t, const Tensor& z,
                          const NoiseSchedule& s);

/// x_{t-1} from x_t; the sigma_t * z term vanishes at t = 1.
ad::Var ddpm_reverse_step(ad::Var x, std::size_t t, const EpsFn& eps,
                          const Tensor& z, const NoiseSchedule& s);
Tensor ddpm_reverse_step(const Tensor& x, std::size_t t,
                         const models::MlpParams& p, const Tensor& z,
                         const NoiseSchedule& s);

ad::Var sde_forward_step(ad::Var x, double t, double dt, const Tensor& dw,
                         const NoiseSchedule& s);
Tensor sde_forward_step(const Tensor& x, double t, double dt, const Tensor& dw,
                        const NoiseSchedule& s);

/// Euler-Maruyama step of the reverse-time SDE from t to t - dt.
ad::Var sde_reverse_step(ad::Var x, double t, double dt, const ScoreFn& score,
                         const Tensor& dw, const NoiseSchedule& s);
Tensor sde_reverse_step(const Tensor& x, double t, double dt,
                        const models::MlpParams& p, const Tensor& dw,
                        const NoiseSchedule& s, double time_scale = 0.0);

// ---------------------------------------------------------------------------
// Training losses

/// Per-row step indices and noise draws for one loss evaluation.
struct LossDraws {
  std::vector<std::size_t> t;
  Tensor eps;
};

LossDraws draw_loss_inputs(std::size_t rows, std::size_t dim, std::size_t t_lo,
                           const NoiseSchedule& s, rng::Stream& stream);

enum class EpsWeighting { kElbo, kUnit };

/// Weight of the eps-prediction error at step t (t >= 2).
double ddpm_weight(std::size_t t, const NoiseSchedule& s);

/// Mean over rows of w_t * ||eps - eps_theta(x_t, t)||^2.
ad::Var ddpm_loss_on(ad::Tape& tape, const EpsFn& eps, const Tensor& x0,
                     const LossDraws& draws, const NoiseSchedule& s,
                     EpsWeighting weighting = EpsWeighting::kElbo);
/// Mean over rows of (1 - alpha_bar_t) * ||s_theta(x_t, t) - target||^2, with
/// the score taking the integer step t.
using StepScoreFn = std::function<ad::Var(ad::Tape&, ad::Var x,
                                          std::span<const std::size_t> t_rows)>;
ad::Var score_matching_loss_on(ad::Tape& tape, const StepScoreFn& score,
                               const Tensor& x0, const LossDraws& draws,
                               const NoiseSchedule& s);
StepScoreFn step_score_from_eps(EpsFn eps, const NoiseSchedule& s);

double ddpm_loss(const models::MlpParams& p, const Tensor& batch,
                 const NoiseSchedule& s, rng::Stream& stream);
double score_matching_loss(const models::MlpParams& p, const Tensor& batch,
                           const NoiseSchedule& s, rng::Stream& stream);

// ---------------------------------------------------------------------------
// Purification

enum class PurifierKind { kDdpm, kVpsde };

const char* kind_name(PurifierKind kind);
PurifierKind parse_kind(const std::string& name);

struct PurifierConfig {
  PurifierKind kind = PurifierKind::kDdpm;
  std::size_t t_star = 0;
  NoiseSchedule schedule;
  std::size_t eot_samples = 1;
  // Network time for continuous t is t * time_scale; 0 means schedule.T().
  double time_scale = 0.0;

  void validate() const;
  double net_time_scale() const;
};

/// Forward samples x_0..x_T* and reverse samples x'_T*..x'_0 of one
/// purification run, backed by a replayable chain of 2 T* steps.
struct Trajectory {
  std::size_t t_star = 0;
  ckpt::ChainRecord chain;

  const Tensor& forward(std::size_t t) const;
  const Tensor& reverse(std::size_t t) const;
  static std::size_t forward_index(std::size_t t) { return t; }
  std::size_t reverse_index(std::size_t t) const { return 2 * t_star - t; }
  const Tensor& output() const { return chain.output(); }
};

class Purifier {
 public:
  Purifier(PurifierConfig cfg, EpsFn eps);
  Purifier(PurifierConfig cfg, const models::MlpParams& p);

  const PurifierConfig& config() const { return cfg_; }
  const EpsFn& eps() const { return eps_; }
  ScoreFn score() const;

  /// The 2 T* step chain for purifying a batch under `key`.
  std::vector<ckpt::StepSpec> build_chain(const rng::Key& key) const;
  Trajectory purify(const Tensor& x, const rng::Key& key) const;

 private:
  PurifierConfig cfg_;
  EpsFn eps_;
};

Trajectory purify(const Tensor& x, const PurifierConfig& cfg,
                  const models::MlpParams& p, const rng::Key& key);

}  // namespace dpa::diffusion
