// SPDX-License-Identifier: Apache-2.0

#include "dpa/attack.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace dpa::attack {

Norm parse_norm(const std::string& s) {
  if (s == "linf") return Norm::kLinf;
  if (s == "l2") return Norm::kL2;
  throw std::invalid_argument("unknown norm '" + s + "' (expected linf or l2)");
}

const char* norm_name(Norm n) { return n == Norm::kLinf ? "linf" : "l2"; }

TimestepKind parse_timesteps(const std::string& s) {
  if (s == "uniform") return TimestepKind::kUniform;
  if (s == "initial_third") return TimestepKind::kInitialThird;
  if (s == "final_third") return TimestepKind::kFinalThird;
  throw std::invalid_argument("unknown timestep strategy '" + s + "'");
}

const char* timesteps_name(TimestepKind k) {
  switch (k) {
    case TimestepKind::kUniform: return "uniform";
    case TimestepKind::kInitialThird: return "initial_third";
    case TimestepKind::kFinalThird: return "final_third";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (!(eps >= 0.0)) throw std::invalid_argument("attack: eps must be >= 0");
  if (n_iter < 1) throw std::invalid_argument("attack: n_iter must be >= 1");
  if (eot < 1) throw std::invalid_argument("attack: eot must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("attack: alpha must lie in [0, 1]");
  }
  if (lambda < 0.0) throw std::invalid_argument("attack: lambda must be >= 0");
  if (spsa_samples < 1) throw std::invalid_argument("attack: spsa_samples < 1");
  if (!(spsa_delta > 0.0)) throw std::invalid_argument("attack: spsa_delta <= 0");
  if (!(joint_weight >= 0.0 && joint_weight <= 1.0)) {
    throw std::invalid_argument("attack: joint_weight must lie in [0, 1]");
  }
  if (!(domain_lo < domain_hi)) throw std::invalid_argument("attack: empty domain");
}

std::vector<int> AttackConfig::halving_points() const {
  if (checkpoints) return *checkpoints;
  std::vector<int> w;
  for (double f : {0.22, 0.44, 0.66, 0.88}) {
    w.push_back(static_cast<int>(std::floor(f * n_iter)));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Geometry

namespace {

std::size_t row_count(const Tensor& x) { return x.rank() == 2 ? x.dim(0) : 1; }
std::size_t row_width(const Tensor& x) { return x.rank() == 2 ? x.dim(1) : x.size(); }

}  // namespace

Tensor project(const Tensor& x, const Tensor& x_orig, double eps, Norm norm,
               double lo, double hi) {
  require_same_shape(x, x_orig, "project");
  const std::size_t rows = row_count(x), w = row_width(x);
  Tensor out = x;
  auto o = out.mutable_data();
  auto c = x_orig.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = o.data() + r * w;
    const double* crow = c.data() + r * w;
    if (norm == Norm::kLinf) {
      for (std::size_t j = 0; j < w; ++j) {
        orow[j] = std::clamp(orow[j], crow[j] - eps, crow[j] + eps);
      }
    } else {
      double n2 = 0;
      for (std::size_t j = 0; j < w; ++j) {
        double d = orow[j] - crow[j];
        n2 += d * d;
      }
      double n = std::sqrt(n2);
      if (n > eps) {
        double k = eps / n;
        for (std::size_t j = 0; j < w; ++j) {
          orow[j] = crow[j] + k * (orow[j] - crow[j]);
        }
      }
    }
    for (std::size_t j = 0; j < w; ++j) orow[j] = std::clamp(orow[j], lo, hi);
  }
  return out;
}

Tensor ascent_direction(const Tensor& g, Norm norm) {
  const std::size_t rows = row_count(g), w = row_width(g);
  Tensor out = g;
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = o.data() + r * w;
    if (norm == Norm::kLinf) {
      for (std::size_t j = 0; j < w; ++j) {
        row[j] = row[j] > 0 ? 1.0 : row[j] < 0 ? -1.0 : 0.0;
      }
    } else {
      double n2 = 0;
      for (std::size_t j = 0; j < w; ++j) n2 += row[j] * row[j];
      double n = std::sqrt(n2);
      for (std::size_t j = 0; j < w; ++j) row[j] = n > 0 ? row[j] / n : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deviated-reconstruction loss

std::vector<std::size_t> sample_timesteps(TimestepKind kind, std::size_t t_star,
                                          rng::Stream& stream) {
  if (t_star < 3) {
    throw std::invalid_argument("sample_timesteps: T* must be >= 3, got " +
                                std::to_string(t_star));
  }
  const std::size_t count = t_star / 3;
  std::size_t lo = 0, hi = t_star;
  if (kind == TimestepKind::kInitialThird) hi = t_star / 3;
  if (kind == TimestepKind::kFinalThird) lo = (2 * t_star + 2) / 3;
  std::vector<std::size_t> pool;
  for (std::size_t t = lo; t <= hi; ++t) pool.push_back(t);
  if (pool.size() < count) {
    throw std::invalid_argument("sample_timesteps: range smaller than count");
  }
  for (std::size_t i = 0; i < count; ++i) {
    auto j = static_cast<std::size_t>(stream.uniform_int(
        static_cast<std::int64_t>(i), static_cast<std::int64_t>(pool.size() - 1)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

namespace {

void check_steps(const diffusion::Trajectory& traj,
                 std::span<const std::size_t> steps) {
  if (steps.empty()) throw std::invalid_argument("deviated loss: no time steps");
  for (std::size_t t : steps) {
    if (t > traj.t_star) {
      throw std::out_of_range("deviated loss: step " + std::to_string(t) +
                              " past T* = " + std::to_string(traj.t_star));
    }
  }
}

}  // namespace

Tensor deviated_loss(const diffusion::Trajectory& traj,
                     std::span<const std::size_t> steps) {
  check_steps(traj, steps);
  const Tensor& x0 = traj.forward(0);
  const std::size_t rows = row_count(x0), w = row_width(x0);
  const double a = 1.0 / static_cast<double>(steps.size());
  std::vector<double> out(rows, 0.0);
  for (std::size_t t : steps) {
    auto f = traj.forward(t).data();
    auto r = traj.reverse(t).data();
    for (std::size_t i = 0; i < rows; ++i) {
      double d2 = 0;
      for (std::size_t j = 0; j < w; ++j) {
        double d = f[i * w + j] - r[i * w + j];
        d2 += d * d;
      }
      out[i] += a * d2;
    }
  }
  return x0.rank() == 2 ? Tensor({rows}, std::move(out)) : Tensor::scalar(out[0]);
}

ckpt::Injections deviated_loss_grads(const diffusion::Trajectory& traj,
                                     std::span<const std::size_t> steps,
                                     double scale) {
  check_steps(traj, steps);
  const double k = 2.0 * scale / static_cast<double>(steps.size());
  ckpt::Injections inj;
  auto add = [&](std::size_t i, const Tensor& g) {
    auto it = inj.find(i);
    if (it == inj.end()) {
      inj.emplace(i, g);
    } else {
      it->second = it->second + g;
    }
  };
  for (std::size_t t : steps) {
    Tensor diff = traj.forward(t) - traj.reverse(t);
    add(traj.forward_index(t), k * diff);
    add(traj.reverse_index(t), (-k) * diff);
  }
  return inj;
}

// ---------------------------------------------------------------------------
// Objective and gradient estimates

DrawGrad objective_draw(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const AttackConfig& cfg,
                        const rng::Key& key, GradMode mode) {
  const auto& pcfg = def.purifier.config();
  DrawGrad out;
  Objective& obj = out.objective;
  obj.traj = def.purifier.purify(x, key);

  ad::Tape tape(nullptr, mode != GradMode::kNone);
  ad::Var purified = tape.variable(obj.traj.output());
  ad::Var logits = models::classify(tape, def.classifier, purified);
  ad::Var ce = models::cross_entropy(logits, y);
  obj.ce_rows = ce.value();
  obj.predictions = models::argmax_rows(logits.value());

  const bool deviate = cfg.lambda != 0.0 && pcfg.t_star > 0;
  if (deviate) {
    auto st = key.stream("timesteps");
    obj.steps = sample_timesteps(cfg.timesteps, pcfg.t_star, st);
    obj.dev_rows = deviated_loss(obj.traj, obj.steps);
  } else {
    obj.dev_rows = Tensor::zeros(obj.ce_rows.shape());
  }
  obj.loss_rows = obj.ce_rows + cfg.lambda * obj.dev_rows;
  if (mode == GradMode::kNone) return out;

  Tensor g_out =
      ad::backward(tape, ce, Tensor::full(obj.ce_rows.shape(), 1.0)).at(purified.id);
  tape.release();
  if (mode == GradMode::kIdentity) {
    out.grad = g_out;
    return out;
  }
  ckpt::Injections inj;
  if (deviate) inj = deviated_loss_grads(obj.traj, obj.steps, cfg.lambda);
  out.grad = mode == GradMode::kSegmentwise
                 ? ckpt::segmentwise_backward(obj.traj.chain, g_out, inj)
                 : ckpt::fullgraph_backward(obj.traj.chain, g_out, inj);
  return out;
}

Objective combined_objective(const Tensor& x, const std::vector<int>& y,
                             const Defense& def, const AttackConfig& cfg,
                             const rng::Key& key) {
  return objective_draw(x, y, def, cfg, key, GradMode::kNone).objective;
}

EotEstimate eot_gradient(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, const AttackConfig& cfg,
                         const rng::Key& key, GradMode mode) {
  if (cfg.eot < 1) throw std::invalid_argument("eot_gradient: eot must be >= 1");
  EotEstimate est;
  est.misclassified.resize(y.size());
  const double inv = 1.0 / static_cast<double>(cfg.eot);
  Tensor gsum, lsum, osum;
  for (int e = 0; e < cfg.eot; ++e) {
    auto d = objective_draw(x, y, def, cfg, key.child("eot=" + std::to_string(e)),
                            mode);
    const auto& obj = d.objective;
    if (e == 0) {
      gsum = d.grad;
      lsum = obj.loss_rows;
      osum = obj.traj.output();
    } else {
      if (mode != GradMode::kNone) gsum = gsum + d.grad;
      lsum = lsum + obj.loss_rows;
      osum = osum + obj.traj.output();
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
      est.misclassified[i].push_back(obj.predictions[i] != y[i]);
    }
  }
  if (mode != GradMode::kNone) est.grad = gsum * inv;
  est.loss_rows = lsum * inv;
  est.mean_output = osum * inv;
  return est;
}

Tensor adjoint_gradient(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const rng::Key& key) {
  const auto& pcfg = def.purifier.config();
  if (pcfg.kind != diffusion::PurifierKind::kVpsde) {
    throw std::invalid_argument("adjoint gradient needs a vpsde purifier");
  }
  // Only the purified output and the noise path are taken from the forward run.
  auto traj = def.purifier.purify(x, key);
  Tensor cur = traj.output();
  Tensor adj;
  {
    ad::Tape tape;
    ad::Var out = tape.variable(cur);
    ad::Var ce = models::cross_entropy(
        models::classify(tape, def.classifier, out), y);
    adj = ad::backward(tape, ce, Tensor::full(ce.value().shape(), 1.0)).at(out.id);
  }
  const std::size_t n = pcfg.t_star;
  if (n == 0) return adj;

  const auto& s = pcfg.schedule;
  const double dt = 1.0 / static_cast<double>(s.T());
  const double sqdt = std::sqrt(dt);
  const auto score = def.purifier.score();
  const auto& steps = traj.chain.steps;

  auto vjp = [&](std::size_t i, const Tensor& at, const Tensor& a) {
    ad::Tape tape;
    ad::Var v = tape.variable(at);
    auto st = rng::Stream::restore(steps[i].rng_state);
    ad::Var yv = steps[i].fn(tape, v, st);
    auto g = ad::backward(tape, yv, a);
    auto it = g.find(v.id);
    return it != g.end() ? it->second : Tensor::zeros(at.shape());
  };

  // Reverse-time steps, newest first: step i maps x'_t to x'_{t-1}.
  for (std::size_t i = 2 * n; i-- > n;) {
    const std::size_t t = 2 * n - i;
    const double tc = static_cast<double>(t) * dt;
    const double b = s.beta_continuous(tc);
    Tensor dw = sqdt * rng::Stream::restore(steps[i].rng_state)
                           .normal_tensor(cur.shape());
    Tensor sc;
    {
      ad::Tape tape(nullptr, false);
      sc = score(tape, tape.constant(cur), tc).value();
    }
    // Backward Euler reconstruction of x'_t from x'_{t-1}.
    Tensor drift = (0.5 * b * dt) * cur + (b * dt) * sc;
    Tensor prev = cur - drift - std::sqrt(b) * dw;
    adj = vjp(i, prev, adj);
    cur = prev;
  }
  // Forward steps are affine in the state; invert them exactly.
  for (std::size_t i = n; i-- > 0;) {
    const double tc = static_cast<double>(i) * dt;
    const double b = s.beta_continuous(tc);
    Tensor dw = sqdt * rng::Stream::restore(steps[i].rng_state)
                           .normal_tensor(cur.shape());
    Tensor prev = (1.0 / (1.0 - 0.5 * b * dt)) * (cur - std::sqrt(b) * dw);
    adj = vjp(i, prev, adj);
    cur = prev;
  }
  return adj;
}

Tensor spsa_gradient(const std::function<Tensor(const Tensor&, std::size_t)>& loss_rows,
                     const Tensor& x, double delta, int k, rng::Stream& stream,
                     Tensor* mean_loss) {
  if (k < 1) throw std::invalid_argument("spsa_gradient: k must be >= 1");
  if (!(delta > 0)) throw std::invalid_argument("spsa_gradient: delta must be > 0");
  const std::size_t rows = row_count(x), w = row_width(x);
  std::vector<double> g(x.size(), 0.0);
  Tensor lsum;
  for (int j = 0; j < k; ++j) {
    std::vector<double> v(x.size());
    for (auto& e : v) e = stream.rademacher();
    Tensor vt(x.shape(), v);
    Tensor lp = loss_rows(x + delta * vt, 2 * static_cast<std::size_t>(j));
    Tensor lm = loss_rows(x - delta * vt, 2 * static_cast<std::size_t>(j) + 1);
    if (lp.size() != rows || lm.size() != rows) {
      throw ShapeError("spsa_gradient: loss must have one entry per row");
    }
    for (std::size_t r = 0; r < rows; ++r) {
      double c = (lp[r] - lm[r]) / (2.0 * delta);
      for (std::size_t i = 0; i < w; ++i) g[r * w + i] += c * v[r * w + i];
    }
    Tensor mid = 0.5 * (lp + lm);
    lsum = j == 0 ? mid : lsum + mid;
  }
  const double inv = 1.0 / static_cast<double>(k);
  for (auto& e : g) e *= inv;
  if (mean_loss) *mean_loss = lsum * inv;
  return Tensor(x.shape(), std::move(g));
}

// ---------------------------------------------------------------------------
// Attack loops

namespace {

using Evaluator =
    std::function<EotEstimate(const Tensor& x, const rng::Key& key, bool grad)>;
using Direction = std::function<Tensor(const Tensor& x, const EotEstimate& e)>;

class Tracker {
 public:
  explicit Tracker(const Tensor& x) {
    res_.adversarial = x;
    res_.best_loss.assign(row_count(x), 0.0);
    res_.misclassified.resize(row_count(x));
  }

  void observe(const Tensor& x, const EotEstimate& e) {
    const std::size_t rows = row_count(x), w = row_width(x);
    auto adv = res_.adversarial.mutable_data();
    auto xv = x.data();
    double best_sum = 0, cur_sum = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      double l = e.loss_rows[r];
      cur_sum += l;
      if (first_ || l > res_.best_loss[r]) {
        res_.best_loss[r] = l;
        std::copy(xv.begin() + r * w, xv.begin() + (r + 1) * w,
                  adv.begin() + r * w);
        if (r < e.misclassified.size()) res_.misclassified[r] = e.misclassified[r];
      }
      best_sum += res_.best_loss[r];
    }
    first_ = false;
    res_.best_trace.push_back(best_sum / static_cast<double>(rows));
    res_.loss_trace.push_back(cur_sum / static_cast<double>(rows));
    res_.iterates.push_back(x);
  }

  AttackResult finish(const Tensor& last) {
    res_.final_iterate = last;
    return std::move(res_);
  }

 private:
  AttackResult res_;
  bool first_ = true;
};

Tensor starting_point(const Tensor& x, const AttackConfig& cfg,
                      const rng::Key& key) {
  if (!cfg.random_start) return x;
  auto st = key.stream("start");
  Tensor u = st.uniform_tensor(x.shape(), -cfg.eps, cfg.eps);
  return project(x + u, x, cfg.eps, cfg.norm, cfg.domain_lo, cfg.domain_hi);
}

// Momentum loop; alpha = 1 with no halving points is plain projected ascent.
AttackResult run_loop(const Tensor& x, const AttackConfig& cfg,
                      const rng::Key& key, double eta, double alpha,
                      const std::vector<int>& halve, const Evaluator& eval,
                      const Direction& direction) {
  cfg.validate();
  auto proj = [&](const Tensor& v) {
    return project(v, x, cfg.eps, cfg.norm, cfg.domain_lo, cfg.domain_hi);
  };
  Tracker tr(x);
  Tensor cur = starting_point(x, cfg, key);
  Tensor prev = cur;
  for (int k = 0; k < cfg.n_iter; ++k) {
    EotEstimate e = eval(cur, key.child("iter=" + std::to_string(k)), true);
    tr.observe(cur, e);
    if (k > 0 && std::find(halve.begin(), halve.end(), k) != halve.end()) {
      eta *= 0.5;
    }
    Tensor z = proj(cur + eta * direction(cur, e));
    Tensor next = (k == 0 || alpha == 1.0)
                      ? z
                      : proj(cur + alpha * (z - cur) + (1.0 - alpha) * (cur - prev));
    prev = cur;
    cur = next;
  }
  tr.observe(cur, eval(cur, key.child("iter=" + std::to_string(cfg.n_iter)), false));
  return tr.finish(cur);
}

Evaluator eot_evaluator(const std::vector<int>& y, const Defense& def,
                        const AttackConfig& cfg, GradMode mode) {
  return [&y, &def, cfg, mode](const Tensor& x, const rng::Key& key, bool grad) {
    return eot_gradient(x, y, def, cfg, key, grad ? mode : GradMode::kNone);
  };
}

Direction grad_direction(Norm norm) {
  return [norm](const Tensor&, const EotEstimate& e) {
    return ascent_direction(e.grad, norm);
  };
}

AttackConfig without_deviation(AttackConfig cfg) {
  cfg.lambda = 0.0;
  return cfg;
}

}  // namespace

AttackResult diffattack(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const AttackConfig& cfg,
                        const rng::Key& key) {
  return run_loop(x, cfg, key, cfg.apgd_step(), cfg.alpha, cfg.halving_points(),
                  eot_evaluator(y, def, cfg, GradMode::kSegmentwise),
                  grad_direction(cfg.norm));
}

AttackResult pgd_attack(const Tensor& x, const std::vector<int>& y,
                        const Defense& def, const AttackConfig& cfg,
                        const rng::Key& key) {
  auto c = without_deviation(cfg);
  return run_loop(x, c, key, c.constant_step(), 1.0, {},
                  eot_evaluator(y, def, c, GradMode::kSegmentwise),
                  grad_direction(c.norm));
}

AttackResult bpda_attack(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, const AttackConfig& cfg,
                         const rng::Key& key) {
  auto c = without_deviation(cfg);
  return run_loop(x, c, key, c.constant_step(), 1.0, {},
                  eot_evaluator(y, def, c, GradMode::kIdentity),
                  grad_direction(c.norm));
}

AttackResult spsa_attack(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, const AttackConfig& cfg,
                         const rng::Key& key) {
  auto c = without_deviation(cfg);
  Evaluator eval = [&y, &def, c](const Tensor& xi, const rng::Key& k, bool grad) {
    if (!grad) return eot_gradient(xi, y, def, c, k, GradMode::kNone);
    auto loss = [&](const Tensor& xp, std::size_t idx) {
      return combined_objective(xp, y, def, c,
                                k.child("spsa=" + std::to_string(idx)))
          .loss_rows;
    };
    auto st = k.stream("spsa/directions");
    EotEstimate e;
    e.grad = spsa_gradient(loss, xi, c.spsa_delta, c.spsa_samples, st, &e.loss_rows);
    return e;
  };
  return run_loop(x, c, key, c.constant_step(), 1.0, {}, eval,
                  grad_direction(c.norm));
}

AttackResult joint_attack(JointMode mode, const Tensor& x,
                          const std::vector<int>& y, const Defense& def,
                          const AttackConfig& cfg, const rng::Key& key) {
  const auto& pcfg = def.purifier.config();
  if (mode == JointMode::kScore &&
      pcfg.kind != diffusion::PurifierKind::kVpsde) {
    throw std::invalid_argument(
        "joint score attack needs a score model; the purifier is not vpsde");
  }
  auto c = without_deviation(cfg);
  const double w = c.joint_weight;
  const double t_eval = 1.0 / static_cast<double>(pcfg.schedule.T());
  auto score = def.purifier.score();
  Direction dir = [=](const Tensor& xi, const EotEstimate& e) {
    Tensor guide;
    if (mode == JointMode::kScore) {
      ad::Tape tape(nullptr, false);
      guide = score(tape, tape.constant(xi), t_eval).value();
    } else {
      guide = e.mean_output - xi;
    }
    return w * ascent_direction(guide, c.norm) +
           (1.0 - w) * ascent_direction(e.grad, c.norm);
  };
  return run_loop(x, c, key, c.constant_step(), 1.0, {},
                  eot_evaluator(y, def, c, GradMode::kSegmentwise), dir);
}

AttackResult adjoint_attack(const Tensor& x, const std::vector<int>& y,
                            const Defense& def, const AttackConfig& cfg,
                            const rng::Key& key) {
  auto c = without_deviation(cfg);
  Evaluator eval = [&y, &def, c](const Tensor& xi, const rng::Key& k, bool grad) {
    EotEstimate e = eot_gradient(xi, y, def, c, k, GradMode::kNone);
    if (!grad) return e;
    Tensor gsum;
    for (int d = 0; d < c.eot; ++d) {
      Tensor g = adjoint_gradient(xi, y, def, k.child("eot=" + std::to_string(d)));
      gsum = d == 0 ? g : gsum + g;
    }
    e.grad = gsum * (1.0 / static_cast<double>(c.eot));
    return e;
  };
  return run_loop(x, c, key, c.apgd_step(), c.alpha, c.halving_points(), eval,
                  grad_direction(c.norm));
}

AttackFn attack_by_name(const std::string& name) {
  if (name == "diffattack") return diffattack;
  if (name == "adaptive") {
    return [](const Tensor& x, const std::vector<int>& y, const Defense& d,
              const AttackConfig& c, const rng::Key& k) {
      return diffattack(x, y, d, without_deviation(c), k);
    };
  }
  if (name == "pgd") return pgd_attack;
  if (name == "bpda") return bpda_attack;
  if (name == "spsa") return spsa_attack;
  if (name == "adjoint") return adjoint_attack;
  if (name == "joint-score" || name == "joint-full") {
    JointMode m = name == "joint-score" ? JointMode::kScore : JointMode::kFull;
    return [m](const Tensor& x, const std::vector<int>& y, const Defense& d,
               const AttackConfig& c, const rng::Key& k) {
      return joint_attack(m, x, y, d, c, k);
    };
  }
  throw std::invalid_argument("unknown attack '" + name + "'");
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult majority_eval(const Tensor& x, const std::vector<int>& y,
                         const Defense& def, int n_draws, const rng::Key& key) {
  if (n_draws < 1) throw std::invalid_argument("majority_eval: n_draws < 1");
  if (y.empty() || row_count(x) != y.size()) {
    throw std::invalid_argument("majority_eval: need one label per input row");
  }
  const std::size_t k = def.classifier.num_classes;
  std::vector<std::vector<int>> votes(y.size(), std::vector<int>(k, 0));
  for (int d = 0; d < n_draws; ++d) {
    auto traj = def.purifier.purify(x, key.child("draw=" + std::to_string(d)));
    auto pred = models::predict(def.classifier, traj.output());
    for (std::size_t i = 0; i < y.size(); ++i) ++votes[i][pred[i]];
  }
  EvalResult res;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    int winner = static_cast<int>(
        std::max_element(votes[i].begin(), votes[i].end()) - votes[i].begin());
    res.correct.push_back(winner == y[i]);
    correct += winner == y[i];
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(y.size());
  return res;
}

EvalResult robust_accuracy(const Tensor& x, const std::vector<int>& y,
                           const AttackFn& attack, const Defense& def,
                           const AttackConfig& cfg, int n_eval_draws,
                           const rng::Key& key, AttackResult* out) {
  AttackResult res = attack(x, y, def, cfg, key.child("attack"));
  EvalResult ev = majority_eval(res.adversarial, y, def, n_eval_draws,
                                key.child("eval"));
  if (out) *out = std::move(res);
  return ev;
}

}  // namespace dpa::attack
