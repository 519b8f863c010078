// SPDX-License-Identifier: Apache-2.0
//
// Attacks on a purify-then-classify defense. All attacks work on a batch
// [B, d]; every row is an independent problem with its own budget, loss and
// best-iterate bookkeeping.

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpa/chain.hpp"
#include "dpa/diffusion.hpp"
#include "dpa/models.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa::attack {

enum class Norm { kLinf, kL2 };
enum class TimestepKind { kUniform, kInitialThird, kFinalThird };

Norm parse_norm(const std::string& s);
const char* norm_name(Norm n);
TimestepKind parse_timesteps(const std::string& s);
const char* timesteps_name(TimestepKind k);

struct AttackConfig {
  double eps = 8.0 / 255.0;
  Norm norm = Norm::kLinf;
  int n_iter = 100;
  int eot = 8;
  double alpha = 0.75;   // momentum
  double lambda = 1.0;   // weight of the deviated-reconstruction loss
  double step_size = 0;  // initial APGD step; 0 means 2 * eps
  // Iterations at which the APGD step is halved; unset means
  // {0.22n, 0.44n, 0.66n, 0.88n} (floored).
  std::optional<std::vector<int>> checkpoints;
  TimestepKind timesteps = TimestepKind::kUniform;
  bool random_start = false;
  double pgd_step = 0;  // constant step of PGD-style loops; 0 means eps / 4
  int spsa_samples = 16;
  double spsa_delta = 0.01;
  double joint_weight = 0.5;
  double domain_lo = 0.0;
  double domain_hi = 1.0;

  void validate() const;
  double apgd_step() const { return step_size > 0 ? step_size : 2.0 * eps; }
  double constant_step() const { return pgd_step > 0 ? pgd_step : eps / 4.0; }
  std::vector<int> halving_points() const;
};

/// Purifier plus classifier under attack.
struct Defense {
  const diffusion::Purifier& purifier;
  const models::ClassifierParams& classifier;
};

struct AttackResult {
  Tensor adversarial;      // best iterate per row
  Tensor final_iterate;
  std::vector<double> best_loss;       // per row
  std::vector<double> best_trace;      // mean over rows of best-so-far loss
  std::vector<double> loss_trace;      // mean over rows of the current loss
  // misclassified[row][draw] for the EOT draws evaluated at the best iterate.
  std::vector<std::vector<bool>> misclassified;
  std::vector<Tensor> iterates;        // x_0, x_1, ... (every evaluated point)
};

/// Projection onto the budget ball around x_orig (per row) and the domain box.
Tensor project(const Tensor& x, const Tensor& x_orig, double eps, Norm norm,
               double lo = 0.0, double hi = 1.0);

/// Ascent direction: sign for linf, row-normalized gradient for l2.
Tensor ascent_direction(const Tensor& g, Norm norm);

std::vector<std::size_t> sample_timesteps(TimestepKind kind, std::size_t t_star,
                                          rng::Stream& stream);

/// Per-row mean over `steps` of ||x_t - x'_t||^2.
Tensor deviated_loss(const diffusion::Trajectory& traj,
                     std::span<const std::size_t> steps);
/// Gradient of scale * sum_rows(deviated_loss) w.r.t. the chain samples.
ckpt::Injections deviated_loss_grads(const diffusion::Trajectory& traj,
                                     std::span<const std::size_t> steps,
                                     double scale);

struct Objective {
  Tensor loss_rows;  // CE + lambda * L_dev per row
  Tensor ce_rows;
  Tensor dev_rows;
  std::vector<int> predictions;
  std::vector<std::size_t> steps;
  diffusion::Trajectory traj;

  double total() const { return sum_all(loss_rows); }
};

enum class GradMode { kNone, kSegmentwise, kFullgraph, kIdentity };

struct DrawGrad {
  Objective objective;
  Tensor grad;  // empty for GradMode::kNone
};

/// One purification draw of the combined objective under `key`, with its
/// input gradient (sum over rows) computed as requested.
DrawGrad objective_draw(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const AttackConfig& cfg,
                        const rng::Key& key, GradMode mode);

Objective combined_objective(const Tensor& x, const std::vector<int>& y,
                             const Defense& def, const AttackConfig& cfg,
                             const rng::Key& key);

struct EotEstimate {
  Tensor grad;
  Tensor loss_rows;  // mean over draws
  std::vector<std::vector<bool>> misclassified;  // [row][draw]
  Tensor mean_output;                            // mean purified input
};

/// Mean over cfg.eot draws (keys key/eot=e) of objective_draw.
EotEstimate eot_gradient(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, const AttackConfig& cfg,
                         const rng::Key& key,
                         GradMode mode = GradMode::kSegmentwise);

/// Input gradient of CE for the vpsde purifier, integrating the adjoint
/// backward along a reconstructed reverse path instead of replaying stored
/// samples.
Tensor adjoint_gradient(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const rng::Key& key);

/// The SPSA estimate of the gradient of sum(loss(x)) with k Rademacher pairs.
Tensor spsa_gradient(const std::function<Tensor(const Tensor&, std::size_t)>& loss_rows,
                     const Tensor& x, double delta, int k, rng::Stream& stream,
                     Tensor* mean_loss = nullptr);

AttackResult diffattack(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const AttackConfig& cfg,
                        const rng::Key& key);
AttackResult pgd_attack(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const AttackConfig& cfg,
                        const rng::Key& key);
AttackResult bpda_attack(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, const AttackConfig& cfg,
                         const rng::Key& key);
AttackResult spsa_attack(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, const AttackConfig& cfg,
                         const rng::Key& key);
enum class JointMode { kScore, kFull };
AttackResult joint_attack(JointMode mode, const Tensor& x,
                          const std::vector<int>& y, const Defense& def,
                          const AttackConfig& cfg, const rng::Key& key);
/// APGD loop driven by adjoint_gradient (vpsde only, CE objective).
AttackResult adjoint_attack(const Tensor& x, const std::vector<int>& y,
                            const Defense& def, const AttackConfig& cfg,
                            const rng::Key& key);

using AttackFn = std::function<AttackResult(
    const Tensor&, const std::vector<int>&, const Defense&, const AttackConfig&,
    const rng::Key&)>;

/// Named attack: diffattack, adaptive (diffattack with lambda = 0), pgd,
/// bpda, spsa, joint-score, joint-full, adjoint.
AttackFn attack_by_name(const std::string& name);

struct EvalResult {
  double accuracy = 0;
  std::vector<bool> correct;
};

/// Majority vote of the classifier over n_draws purification draws.
EvalResult majority_eval(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, int n_draws, const rng::Key& key);

EvalResult robust_accuracy(const Tensor& x, const std::vector<int>& y,
                           const AttackFn& attack, const Defense& def,
                           const AttackConfig& cfg, int n_eval_draws,
                           const rng::Key& key, AttackResult* out = nullptr);

}  // namespace dpa::attack
