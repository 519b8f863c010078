// SPDX-License-Identifier: Apache-2.0

#include "dpa/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dpa::diffusion {

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule::NoiseSchedule(std::vector<double> betas)
    : betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("schedule: T must be >= 1");
  alpha_bars_.push_back(1.0);
  sigmas_.push_back(0.0);
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    double b = betas_[i];
    if (!(b > 0.0 && b < 1.0)) {
      throw std::invalid_argument("schedule: beta_" + std::to_string(i + 1) +
                                  " = " + std::to_string(b) +
                                  " is outside (0, 1)");
    }
    alphas_.push_back(1.0 - b);
    alpha_bars_.push_back(alpha_bars_.back() * alphas_.back());
    const double ab = alpha_bars_.back();
    const double ab_prev = alpha_bars_[alpha_bars_.size() - 2];
    sigmas_.push_back(std::sqrt(b * (1.0 - ab_prev) / (1.0 - ab)));
  }
}

void NoiseSchedule::check_step(std::size_t t, std::size_t lo) const {
  if (t < lo || t > T()) {
    throw std::out_of_range("schedule: step " + std::to_string(t) +
                            " outside [" + std::to_string(lo) + ", " +
                            std::to_string(T()) + "]");
  }
}

double NoiseSchedule::beta(std::size_t t) const {
  check_step(t, 1);
  return betas_[t - 1];
}

double NoiseSchedule::alpha(std::size_t t) const {
  check_step(t, 1);
  return alphas_[t - 1];
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
  check_step(t, 0);
  return alpha_bars_[t];
}

double NoiseSchedule::sigma(std::size_t t) const {
  check_step(t, 1);
  return sigmas_[t];
}

double NoiseSchedule::beta_continuous(double t) const {
  const double n = static_cast<double>(T());
  return n * (betas_.front() + t * (betas_.back() - betas_.front()));
}

double NoiseSchedule::alpha_bar_continuous(double t) const {
  const double n = static_cast<double>(T());
  const double b0 = betas_.front(), b1 = betas_.back();
  return std::exp(-n * (b0 * t + 0.5 * t * t * (b1 - b0)));
}

NoiseSchedule linear_schedule(std::size_t T, double beta_min, double beta_max) {
  if (T < 1) throw std::invalid_argument("linear_schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw std::invalid_argument(
        "linear_schedule: need 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> betas(T);
  for (std::size_t i = 0; i < T; ++i) {
    double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    betas[i] = beta_min + f * (beta_max - beta_min);
  }
  return NoiseSchedule(std::move(betas));
}

// ---------------------------------------------------------------------------
// Networks as callables

EpsFn eps_from_params(const models::MlpParams& p) {
  models::validate(p);
  return [&p](ad::Tape& tape, ad::Var x, std::span<const double> ts) {
    return models::eps_theta(p, models::bind(tape, p, false), x, ts);
  };
}

ScoreFn score_from_eps(EpsFn eps, const NoiseSchedule& s, double time_scale) {
  return [eps = std::move(eps), s, time_scale](ad::Tape& tape, ad::Var x,
                                                double t) {
    std::vector<double> ts(x.value().rows(), t * time_scale);
    double k = -1.0 / std::sqrt(1.0 - s.alpha_bar_continuous(t));
    return ad::scale(eps(tape, x, ts), k);
  };
}

// ---------------------------------------------------------------------------
// Steps

Tensor diffuse_closed_form(const Tensor& x0, std::size_t t, const Tensor& eps,
                           const NoiseSchedule& s) {
  if (t < 1 || t > s.T()) {
    throw std::out_of_range("diffuse_closed_form: step " + std::to_string(t) +
                            " outside [1, " + std::to_string(s.T()) + "]");
  }
  require_same_shape(x0, eps, "diffuse_closed_form");
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

ad::Var ddpm_forward_step(ad::Var x, std::size_t t, const Tensor& z,
                          const NoiseSchedule& s) {
  require_same_shape(x.value(), z, "ddpm_forward_step");
  ad::Var noise = x.tape->constant(std::sqrt(s.beta(t)) * z);
  return ad::add(ad::scale(x, std::sqrt(s.alpha(t))), noise);
}

ad::Var ddpm_reverse_step(ad::Var x, std::size_t t, const EpsFn& eps,
                          const Tensor& z, const NoiseSchedule& s) {
  if (t < 1 || t > s.T()) {
    throw std::out_of_range("ddpm_reverse_step: step " + std::to_string(t) +
                            " outside [1, " + std::to_string(s.T()) + "]");
  }
  require_same_shape(x.value(), z, "ddpm_reverse_step");
  const double a = s.alpha(t);
  const double coef = (1.0 - a) / std::sqrt(1.0 - s.alpha_bar(t));
  std::vector<double> ts(x.value().rows(), static_cast<double>(t));
  ad::Var e = eps(*x.tape, x, ts);
  ad::Var mean = ad::scale(ad::sub(x, ad::scale(e, coef)), 1.0 / std::sqrt(a));
  if (t == 1) return mean;
  return ad::add(mean, x.tape->constant(s.sigma(t) * z));
}

Tensor ddpm_reverse_step(const Tensor& x, std::size_t t,
                         const models::MlpParams& p, const Tensor& z,
                         const NoiseSchedule& s) {
  ad::Tape tape(nullptr, false);
  return ddpm_reverse_step(tape.constant(x), t, eps_from_params(p), z, s)
      .value();
}

ad::Var sde_forward_step(ad::Var x, double t, double dt, const Tensor& dw,
                         const NoiseSchedule& s) {
  if (!(dt > 0.0)) throw std::invalid_argument("sde_forward_step: dt <= 0");
  require_same_shape(x.value(), dw, "sde_forward_step");
  const double b = s.beta_continuous(t);
  ad::Var noise = x.tape->constant(std::sqrt(b) * dw);
  return ad::add(ad::scale(x, 1.0 - 0.5 * b * dt), noise);
}

Tensor sde_forward_step(const Tensor& x, double t, double dt, const Tensor& dw,
                        const NoiseSchedule& s) {
  ad::Tape tape(nullptr, false);
  return sde_forward_step(tape.constant(x), t, dt, dw, s).value();
}

ad::Var sde_reverse_step(ad::Var x, double t, double dt, const ScoreFn& score,
                         const Tensor& dw, const NoiseSchedule& s) {
  if (!(dt > 0.0)) throw std::invalid_argument("sde_reverse_step: dt <= 0");
  require_same_shape(x.value(), dw, "sde_reverse_step");
  const double b = s.beta_continuous(t);
  // x - [-b/2 x - b s] dt + sqrt(b) dw
  ad::Var sc = score(*x.tape, x, t);
  ad::Var drift = ad::add(ad::scale(x, 1.0 + 0.5 * b * dt), ad::scale(sc, b * dt));
  return ad::add(drift, x.tape->constant(std::sqrt(b) * dw));
}

Tensor sde_reverse_step(const Tensor& x, double t, double dt,
                        const models::MlpParams& p, const Tensor& dw,
                        const NoiseSchedule& s, double time_scale) {
  ad::Tape tape(nullptr, false);
  double ts = time_scale > 0.0 ? time_scale : static_cast<double>(s.T());
  return sde_reverse_step(tape.constant(x), t, dt,
                          score_from_eps(eps_from_params(p), s, ts), dw, s)
      .value();
}

// ---------------------------------------------------------------------------
// Losses

LossDraws draw_loss_inputs(std::size_t rows, std::size_t dim, std::size_t t_lo,
                           const NoiseSchedule& s, rng::Stream& stream) {
  if (t_lo < 1 || t_lo > s.T()) {
    throw std::invalid_argument("loss draws: no admissible steps in [" +
                                std::to_string(t_lo) + ", " +
                                std::to_string(s.T()) + "]");
  }
  LossDraws d;
  for (std::size_t r = 0; r < rows; ++r) {
    d.t.push_back(static_cast<std::size_t>(stream.uniform_int(
        static_cast<std::int64_t>(t_lo), static_cast<std::int64_t>(s.T()))));
  }
  d.eps = stream.normal_tensor({rows, dim});
  return d;
}

double ddpm_weight(std::size_t t, const NoiseSchedule& s) {
  if (t < 2) {
    throw std::out_of_range("ddpm_weight: undefined at t = 1 (sigma_1 = 0)");
  }
  const double b = s.beta(t), sg = s.sigma(t);
  return b * b / (2.0 * sg * sg * s.alpha(t) * (1.0 - s.alpha_bar(t)));
}

namespace {

void check_batch(const Tensor& x0, const LossDraws& d, const char* what) {
  if (x0.rank() != 2 || x0.dim(0) == 0) {
    throw std::invalid_argument(std::string(what) + ": empty or non-matrix batch");
  }
  if (d.t.size() != x0.dim(0)) {
    throw ShapeError(std::string(what) + ": draws do not match batch rows");
  }
  require_same_shape(x0, d.eps, what);
}

Tensor noised_batch(const Tensor& x0, const LossDraws& d, const NoiseSchedule& s) {
  const std::size_t rows = x0.dim(0), dim = x0.dim(1);
  std::vector<double> out(rows * dim);
  auto xv = x0.data();
  auto ev = d.eps.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double ab = s.alpha_bar(d.t[r]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t c = 0; c < dim; ++c) {
      out[r * dim + c] = a * xv[r * dim + c] + b * ev[r * dim + c];
    }
  }
  return Tensor({rows, dim}, std::move(out));
}

Tensor row_weights(const std::vector<double>& w, std::size_t dim) {
  std::vector<double> out;
  out.reserve(w.size() * dim);
  for (double v : w) out.insert(out.end(), dim, v);
  return Tensor({w.size(), dim}, std::move(out));
}

ad::Var weighted_row_mean(ad::Var diff, const std::vector<double>& w) {
  const std::size_t dim = diff.value().dim(1);
  ad::Var wt = diff.tape->constant(row_weights(w, dim));
  return ad::scale(ad::sum(ad::mul(ad::square(diff), wt)),
                   1.0 / static_cast<double>(w.size()));
}

}  // namespace

ad::Var ddpm_loss_on(ad::Tape& tape, const EpsFn& eps, const Tensor& x0,
                     const LossDraws& draws, const NoiseSchedule& s,
                     EpsWeighting weighting) {
  check_batch(x0, draws, "ddpm_loss");
  std::vector<double> ts, w;
  for (std::size_t t : draws.t) {
    ts.push_back(static_cast<double>(t));
    w.push_back(weighting == EpsWeighting::kElbo ? ddpm_weight(t, s) : 1.0);
  }
  ad::Var xt = tape.constant(noised_batch(x0, draws, s));
  ad::Var pred = eps(tape, xt, ts);
  return weighted_row_mean(ad::sub(tape.constant(draws.eps), pred), w);
}

StepScoreFn step_score_from_eps(EpsFn eps, const NoiseSchedule& s) {
  return [eps = std::move(eps), s](ad::Tape& tape, ad::Var x,
                                   std::span<const std::size_t> t_rows) {
    const std::size_t dim = x.value().dim(1);
    std::vector<double> ts, k;
    for (std::size_t t : t_rows) {
      ts.push_back(static_cast<double>(t));
      k.push_back(-1.0 / std::sqrt(1.0 - s.alpha_bar(t)));
    }
    return ad::mul(eps(tape, x, ts), tape.constant(row_weights(k, dim)));
  };
}

ad::Var score_matching_loss_on(ad::Tape& tape, const StepScoreFn& score,
                               const Tensor& x0, const LossDraws& draws,
                               const NoiseSchedule& s) {
  check_batch(x0, draws, "score_matching_loss");
  const std::size_t dim = x0.dim(1);
  std::vector<double> lam, inv;
  for (std::size_t t : draws.t) {
    const double ab = s.alpha_bar(t);
    lam.push_back(1.0 - ab);
    inv.push_back(-1.0 / std::sqrt(1.0 - ab));
  }
  // grad log p(x_t | x_0) = -(x_t - sqrt(ab) x_0) / (1 - ab) = -eps / sqrt(1 - ab)
  Tensor target = hadamard(draws.eps, row_weights(inv, dim));
  ad::Var xt = tape.constant(noised_batch(x0, draws, s));
  ad::Var pred = score(tape, xt, draws.t);
  return weighted_row_mean(ad::sub(pred, tape.constant(target)), lam);
}

double ddpm_loss(const models::MlpParams& p, const Tensor& batch,
                 const NoiseSchedule& s, rng::Stream& stream) {
  if (batch.rank() != 2 || batch.dim(0) == 0) {
    throw std::invalid_argument("ddpm_loss: empty batch");
  }
  auto draws = draw_loss_inputs(batch.dim(0), batch.dim(1), 2, s, stream);
  ad::Tape tape(nullptr, false);
  return ddpm_loss_on(tape, eps_from_params(p), batch, draws, s).value().item();
}

double score_matching_loss(const models::MlpParams& p, const Tensor& batch,
                           const NoiseSchedule& s, rng::Stream& stream) {
  if (batch.rank() != 2 || batch.dim(0) == 0) {
    throw std::invalid_argument("score_matching_loss: empty batch");
  }
  auto draws = draw_loss_inputs(batch.dim(0), batch.dim(1), 1, s, stream);
  ad::Tape tape(nullptr, false);
  return score_matching_loss_on(tape, step_score_from_eps(eps_from_params(p), s),
                                batch, draws, s)
      .value()
      .item();
}

// ---------------------------------------------------------------------------
// Purifier

const char* kind_name(PurifierKind kind) {
  return kind == PurifierKind::kDdpm ? "ddpm" : "vpsde";
}

PurifierKind parse_kind(const std::string& name) {
  if (name == "ddpm") return PurifierKind::kDdpm;
  if (name == "vpsde") return PurifierKind::kVpsde;
  throw std::invalid_argument("unknown purifier kind '" + name + "'");
}

void PurifierConfig::validate() const {
  if (schedule.T() == 0) throw std::invalid_argument("purifier: empty schedule");
  if (t_star > schedule.T()) {
    throw std::invalid_argument("purifier: t_star " + std::to_string(t_star) +
                                " exceeds T " + std::to_string(schedule.T()));
  }
  if (eot_samples < 1) throw std::invalid_argument("purifier: eot_samples < 1");
  if (time_scale < 0.0) throw std::invalid_argument("purifier: time_scale < 0");
}

double PurifierConfig::net_time_scale() const {
  return time_scale > 0.0 ? time_scale : static_cast<double>(schedule.T());
}

const Tensor& Trajectory::forward(std::size_t t) const {
  if (t > t_star) throw std::out_of_range("trajectory: forward step past T*");
  return chain.samples[forward_index(t)];
}

const Tensor& Trajectory::reverse(std::size_t t) const {
  if (t > t_star) throw std::out_of_range("trajectory: reverse step past T*");
  return chain.samples[reverse_index(t)];
}

Purifier::Purifier(PurifierConfig cfg, EpsFn eps)
    : cfg_(std::move(cfg)), eps_(std::move(eps)) {
  cfg_.validate();
  if (!eps_) throw std::invalid_argument("purifier: missing noise predictor");
}

Purifier::Purifier(PurifierConfig cfg, const models::MlpParams& p)
    : Purifier(std::move(cfg), eps_from_params(p)) {}

ScoreFn Purifier::score() const {
  return score_from_eps(eps_, cfg_.schedule, cfg_.net_time_scale());
}

std::vector<ckpt::StepSpec> Purifier::build_chain(const rng::Key& key) const {
  std::vector<ckpt::StepSpec> steps;
  const auto& s = cfg_.schedule;
  const std::size_t n = cfg_.t_star;
  const double dt = 1.0 / static_cast<double>(s.T());
  const double sqdt = std::sqrt(dt);

  for (std::size_t t = 1; t <= n; ++t) {
    std::string label = "purify/fwd/step=" + std::to_string(t);
    ckpt::StepFn fn;
    if (cfg_.kind == PurifierKind::kDdpm) {
      fn = [s, t](ad::Tape&, ad::Var x, rng::Stream& st) {
        return ddpm_forward_step(x, t, st.normal_tensor(x.value().shape()), s);
      };
    } else {
      const double tc = static_cast<double>(t - 1) * dt;
      fn = [s, tc, dt, sqdt](ad::Tape&, ad::Var x, rng::Stream& st) {
        return sde_forward_step(x, tc, dt, sqdt * st.normal_tensor(x.value().shape()),
                                s);
      };
    }
    steps.push_back({label, std::move(fn), key.stream(label).state()});
  }
  for (std::size_t t = n; t >= 1; --t) {
    std::string label = "purify/rev/step=" + std::to_string(t);
    ckpt::StepFn fn;
    if (cfg_.kind == PurifierKind::kDdpm) {
      fn = [s, t, eps = eps_](ad::Tape&, ad::Var x, rng::Stream& st) {
        Tensor z = t > 1 ? st.normal_tensor(x.value().shape())
                         : Tensor::zeros(x.value().shape());
        return ddpm_reverse_step(x, t, eps, z, s);
      };
    } else {
      const double tc = static_cast<double>(t) * dt;
      fn = [s, tc, dt, sqdt, score = score()](ad::Tape&, ad::Var x,
                                              rng::Stream& st) {
        return sde_reverse_step(x, tc, dt, score,
                                sqdt * st.normal_tensor(x.value().shape()), s);
      };
    }
    steps.push_back({label, std::move(fn), key.stream(label).state()});
  }
  return steps;
}

Trajectory Purifier::purify(const Tensor& x, const rng::Key& key) const {
  Trajectory traj;
  traj.t_star = cfg_.t_star;
  traj.chain = cfg_.t_star == 0 ? ckpt::ChainRecord::identity(x)
                                : ckpt::forward_record(build_chain(key), x);
  return traj;
}

Trajectory purify(const Tensor& x, const PurifierConfig& cfg,
                  const models::MlpParams& p, const rng::Key& key) {
  return Purifier(cfg, p).purify(x, key);
}

}  // namespace dpa::diffusion
