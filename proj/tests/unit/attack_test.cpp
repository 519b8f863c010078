// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "dpa/attack.hpp"

namespace dpa::attack {
namespace {

using diffusion::PurifierConfig;
using diffusion::PurifierKind;

PurifierConfig purifier_config(PurifierKind kind, std::size_t t_star,
                               std::size_t T = 20) {
  PurifierConfig c;
  c.kind = kind;
  c.t_star = t_star;
  c.schedule = diffusion::linear_schedule(T, 1e-3, 5e-2);
  return c;
}

// Small random networks shared by the tests below.
struct Fixture {
  models::MlpParams net;
  models::ClassifierParams clf;
  Tensor x;
  std::vector<int> y;

  explicit Fixture(std::uint64_t seed = 1, std::size_t rows = 4) {
    rng::Stream st(seed, "fixture");
    net = models::init_mlp(2, {16}, 4, st);
    clf = models::init_classifier(2, {16}, 3, st);
    x = st.uniform_tensor({rows, 2}, 0.2, 0.8);
    for (std::size_t i = 0; i < rows; ++i) y.push_back(static_cast<int>(i % 3));
  }
};

AttackConfig small_attack() {
  AttackConfig c;
  c.eps = 0.1;
  c.n_iter = 5;
  c.eot = 2;
  return c;
}

void expect_in_budget(const Tensor& adv, const Tensor& x, const AttackConfig& c) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double n2 = 0, ninf = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double d = adv.at(r, j) - x.at(r, j);
      n2 += d * d;
      ninf = std::max(ninf, std::abs(d));
      EXPECT_GE(adv.at(r, j), c.domain_lo);
      EXPECT_LE(adv.at(r, j), c.domain_hi);
    }
    double n = c.norm == Norm::kLinf ? ninf : std::sqrt(n2);
    EXPECT_LE(n, c.eps + 1e-12);
  }
}

TEST(Project, Examples) {
  Tensor o = Tensor::matrix({{0.0, 0.0}});
  Tensor in = Tensor::matrix({{0.05, -0.02}});
  EXPECT_TRUE(project(in, o, 0.1, Norm::kLinf, -1, 1).bit_equal(in));
  EXPECT_EQ(project(Tensor::matrix({{0.5, 0.0}}), o, 0.1, Norm::kLinf, -1, 1)[0],
            0.1);
  Tensor l2 = project(Tensor::matrix({{3.0, 4.0}}), o, 1.0, Norm::kL2, -10, 10);
  EXPECT_NEAR(l2[0], 0.6, 1e-15);
  EXPECT_NEAR(l2[1], 0.8, 1e-15);
  // Domain box applies after the ball.
  Tensor boxed = project(Tensor::matrix({{-0.05, 0.0}}), o, 0.1, Norm::kLinf);
  EXPECT_EQ(boxed[0], 0.0);
  EXPECT_THROW(project(in, Tensor::matrix({{0.0, 0.0, 0.0}}), 0.1, Norm::kLinf),
               ShapeError);
}

TEST(Project, RandomPointsSatisfyBudget) {
  rng::Stream st(2, "proj");
  for (Norm n : {Norm::kLinf, Norm::kL2}) {
    AttackConfig c;
    c.norm = n;
    c.eps = 0.07;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = st.uniform_tensor({3, 5}, 0, 1);
      Tensor far = x + st.normal_tensor({3, 5});
      expect_in_budget(project(far, x, c.eps, n), x, c);
    }
  }
}

TEST(Timesteps, RangesAndCounts) {
  for (int seed = 0; seed < 20; ++seed) {
    rng::Stream st(seed, "ts");
    auto u = sample_timesteps(TimestepKind::kUniform, 9, st);
    ASSERT_EQ(u.size(), 3u);
    EXPECT_EQ(std::set<std::size_t>(u.begin(), u.end()).size(), 3u);
    EXPECT_LE(u.back(), 9u);
    auto i = sample_timesteps(TimestepKind::kInitialThird, 9, st);
    ASSERT_EQ(i.size(), 3u);
    EXPECT_LE(i.back(), 3u);
    auto f = sample_timesteps(TimestepKind::kFinalThird, 9, st);
    ASSERT_EQ(f.size(), 3u);
    EXPECT_GE(f.front(), 6u);
    EXPECT_EQ(std::set<std::size_t>(f.begin(), f.end()).size(), 3u);
  }
  rng::Stream st(0, "ts");
  for (std::size_t t = 3; t <= 40; ++t) {
    for (auto k : {TimestepKind::kUniform, TimestepKind::kInitialThird,
                   TimestepKind::kFinalThird}) {
      EXPECT_EQ(sample_timesteps(k, t, st).size(), t / 3);
    }
  }
  EXPECT_THROW(sample_timesteps(TimestepKind::kUniform, 2, st),
               std::invalid_argument);
  EXPECT_EQ(parse_timesteps("final_third"), TimestepKind::kFinalThird);
  EXPECT_THROW(parse_timesteps("middle"), std::invalid_argument);
}

// Trajectory with hand-placed samples; reverse(t) lives at index 2T* - t.
diffusion::Trajectory manual_trajectory(std::size_t t_star,
                                        std::vector<Tensor> samples) {
  diffusion::Trajectory tr;
  tr.t_star = t_star;
  tr.chain.samples = std::move(samples);
  return tr;
}

TEST(DeviatedLoss, Examples) {
  Tensor z = Tensor::matrix({{0.0, 0.0}});
  Tensor ones = Tensor::matrix({{1.0, 1.0}});
  auto same = manual_trajectory(2, {z, ones, z, ones, z});
  std::vector<std::size_t> one{1};
  EXPECT_EQ(deviated_loss(same, one)[0], 0.0);

  auto single = manual_trajectory(2, {z, z, z, ones, z});
  EXPECT_EQ(deviated_loss(single, one)[0], 2.0);

  Tensor d1 = Tensor::matrix({{1.0, 0.0}});
  Tensor d3 = Tensor::matrix({{1.0, std::sqrt(2.0)}});
  auto two = manual_trajectory(3, {z, z, z, z, d3, d1, z});
  std::vector<std::size_t> both{1, 2};
  EXPECT_NEAR(deviated_loss(two, both)[0], 2.0, 1e-15);

  EXPECT_THROW(deviated_loss(two, std::vector<std::size_t>{}),
               std::invalid_argument);
  EXPECT_THROW(deviated_loss(two, std::vector<std::size_t>{4}), std::out_of_range);
}

TEST(DeviatedLoss, GradientsMatchFiniteDifferences) {
  rng::Stream st(4, "dev");
  std::vector<Tensor> samples;
  for (int i = 0; i < 9; ++i) samples.push_back(st.normal_tensor({3, 2}));
  auto tr = manual_trajectory(4, samples);
  std::vector<std::size_t> steps{0, 1, 3};
  auto inj = deviated_loss_grads(tr, steps, 1.5);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto f = [&](const Tensor& v) {
      auto t2 = tr;
      t2.chain.samples[i] = v;
      return 1.5 * sum_all(deviated_loss(t2, steps));
    };
    Tensor fd = ad::finite_diff_grad(f, samples[i], 1e-6);
    Tensor g = inj.count(i) ? inj.at(i) : Tensor::zeros(fd.shape());
    EXPECT_LE(max_abs_diff(g, fd), 1e-7) << "sample " << i;
  }
}

TEST(Objective, DegenerateWeightAndDeterminism) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 6), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  rng::Key key(9, "obj");

  c.lambda = 0;
  auto o0 = combined_objective(f.x, f.y, def, c, key);
  EXPECT_TRUE(o0.loss_rows.bit_equal(o0.ce_rows));
  Tensor logits = models::classify(f.clf, o0.traj.output());
  for (std::size_t r = 0; r < f.y.size(); ++r) {
    EXPECT_NEAR(o0.ce_rows[r], models::cross_entropy(logits.row(r), f.y[r]),
                1e-12);
  }

  c.lambda = 1;
  auto o1 = combined_objective(f.x, f.y, def, c, key);
  auto o1b = combined_objective(f.x, f.y, def, c, key);
  EXPECT_TRUE(o1.loss_rows.bit_equal(o1b.loss_rows));
  EXPECT_EQ(o1.steps.size(), 2u);
  EXPECT_GT(sum_all(o1.dev_rows), 0.0);

  c.lambda = 1e8;
  auto big = combined_objective(f.x, f.y, def, c, key);
  EXPECT_NEAR(big.total() / (1e8 * sum_all(big.dev_rows)), 1.0, 1e-6);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  for (auto kind : {PurifierKind::kVpsde, PurifierKind::kDdpm}) {
    for (double lambda : {0.0, 1.0}) {
      Fixture f(3, 3);
      diffusion::Purifier pur(purifier_config(kind, 6), f.net);
      Defense def{pur, f.clf};
      AttackConfig c = small_attack();
      c.lambda = lambda;
      rng::Key key(11, "fd");
      auto d = objective_draw(f.x, f.y, def, c, key, GradMode::kSegmentwise);
      auto fn = [&](const Tensor& v) {
        return combined_objective(v, f.y, def, c, key).total();
      };
      Tensor fd = ad::finite_diff_grad(fn, f.x, 1e-6);
      EXPECT_LE(norm2(d.grad - fd) / norm2(fd), 1e-4)
          << diffusion::kind_name(kind) << " lambda=" << lambda;
    }
  }
}

TEST(Objective, SegmentwiseEqualsFullgraphBitwise) {
  Fixture f;
  for (std::size_t t_star : {5u, 15u}) {
    diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, t_star), f.net);
    Defense def{pur, f.clf};
    AttackConfig c = small_attack();
    rng::Key key(5, "eq");
    auto a = objective_draw(f.x, f.y, def, c, key, GradMode::kSegmentwise);
    auto b = objective_draw(f.x, f.y, def, c, key, GradMode::kFullgraph);
    EXPECT_TRUE(a.grad.bit_equal(b.grad)) << "T*=" << t_star;
  }
}

TEST(Eot, MeanOfSingleDraws) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 5), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.eot = 3;
  rng::Key key(6, "eot");
  auto est = eot_gradient(f.x, f.y, def, c, key);
  Tensor sum;
  for (int e = 0; e < 3; ++e) {
    auto d = objective_draw(f.x, f.y, def, c, key.child("eot=" + std::to_string(e)),
                            GradMode::kSegmentwise);
    sum = e == 0 ? d.grad : sum + d.grad;
  }
  EXPECT_LE(max_abs_diff(est.grad, sum * (1.0 / 3.0)), 1e-15);
  ASSERT_EQ(est.misclassified.size(), f.y.size());
  EXPECT_EQ(est.misclassified[0].size(), 3u);

  c.eot = 1;
  auto one = eot_gradient(f.x, f.y, def, c, key);
  auto single = objective_draw(f.x, f.y, def, c, key.child("eot=0"),
                               GradMode::kSegmentwise);
  EXPECT_TRUE(one.grad.bit_equal(single.grad));
}

TEST(Eot, AveragingReducesVariance) {
  Fixture f(2, 2);
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 5), f.net);
  Defense def{pur, f.clf};
  auto trace_var = [&](int eot) {
    AttackConfig c = small_attack();
    c.eot = eot;
    std::vector<Tensor> gs;
    for (int rep = 0; rep < 50; ++rep) {
      rng::Key key(100 + rep, "var");
      gs.push_back(eot_gradient(f.x, f.y, def, c, key).grad);
    }
    Tensor mean = gs[0];
    for (std::size_t i = 1; i < gs.size(); ++i) mean = mean + gs[i];
    mean = mean * (1.0 / gs.size());
    double v = 0;
    for (const auto& g : gs) v += dot(g - mean, g - mean);
    return v / (gs.size() - 1);
  };
  EXPECT_LT(trace_var(8), trace_var(1));
}

TEST(Diffattack, CollapsesToPgd) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kDdpm, 0), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.eot = 1;
  c.lambda = 0;
  c.alpha = 1.0;
  c.checkpoints = std::vector<int>{};
  c.step_size = c.constant_step();
  rng::Key key(8, "collapse");
  auto a = diffattack(f.x, f.y, def, c, key);
  auto b = pgd_attack(f.x, f.y, def, c, key);
  ASSERT_EQ(a.iterates.size(), b.iterates.size());
  for (std::size_t i = 0; i < a.iterates.size(); ++i) {
    EXPECT_TRUE(a.iterates[i].bit_equal(b.iterates[i])) << "iterate " << i;
  }
  EXPECT_TRUE(a.adversarial.bit_equal(b.adversarial));
}

TEST(Diffattack, SingleIterationIsOneGradientStep) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kDdpm, 0), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.n_iter = 1;
  c.eot = 1;
  c.lambda = 0;
  rng::Key key(8, "one");
  auto res = diffattack(f.x, f.y, def, c, key);
  ad::Tape tape;
  ad::Var v = tape.variable(f.x);
  ad::Var ce = models::cross_entropy(models::classify(tape, f.clf, v), f.y);
  Tensor g = ad::backward(tape, ce, Tensor::full(ce.value().shape(), 1.0)).at(v.id);
  Tensor expect = project(f.x + 2.0 * c.eps * ascent_direction(g, Norm::kLinf),
                          f.x, c.eps, Norm::kLinf);
  ASSERT_EQ(res.iterates.size(), 2u);
  EXPECT_TRUE(res.iterates[1].bit_equal(expect));
  EXPECT_TRUE(res.final_iterate.bit_equal(expect));
}

TEST(Attacks, BudgetAndMonotoneBestTrace) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 4), f.net);
  Defense def{pur, f.clf};
  for (Norm n : {Norm::kLinf, Norm::kL2}) {
    AttackConfig c = small_attack();
    c.norm = n;
    c.spsa_samples = 4;
    for (const char* name : {"diffattack", "adaptive", "pgd", "bpda", "spsa",
                             "joint-score", "joint-full", "adjoint"}) {
      auto res = attack_by_name(name)(f.x, f.y, def, c, rng::Key(3, name));
      SCOPED_TRACE(name);
      expect_in_budget(res.adversarial, f.x, c);
      expect_in_budget(res.final_iterate, f.x, c);
      for (const auto& it : res.iterates) expect_in_budget(it, f.x, c);
      ASSERT_EQ(res.best_trace.size(), static_cast<std::size_t>(c.n_iter) + 1);
      for (std::size_t i = 1; i < res.best_trace.size(); ++i) {
        EXPECT_GE(res.best_trace[i], res.best_trace[i - 1]);
      }
      EXPECT_EQ(res.best_loss.size(), f.y.size());
    }
  }
  EXPECT_THROW(attack_by_name("square"), std::invalid_argument);
}

TEST(Attacks, ZeroBudgetReturnsInput) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 3), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.eps = 0;
  c.spsa_samples = 2;
  for (auto fn : {pgd_attack, spsa_attack, diffattack}) {
    auto res = fn(f.x, f.y, def, c, rng::Key(1));
    EXPECT_TRUE(res.adversarial.bit_equal(f.x));
  }
}

TEST(Pgd, FlipsNearBoundaryPoint) {
  // Linear classifier with boundary x0 = 0.5.
  auto clf = models::zero_classifier(2, {}, 2);
  clf.weights[0] = Tensor::matrix({{1.0, -1.0}, {0.0, 0.0}});
  clf.biases[0] = Tensor::vector({-0.5, 0.5});
  models::MlpParams net = models::zero_mlp(2, {4}, 4);
  diffusion::Purifier pur(purifier_config(PurifierKind::kDdpm, 0), net);
  Defense def{pur, clf};
  Tensor x = Tensor::matrix({{0.53, 0.5}, {0.9, 0.5}});
  std::vector<int> y{0, 0};
  AttackConfig c = small_attack();
  c.eps = 0.05;
  c.n_iter = 10;
  c.eot = 1;
  auto res = pgd_attack(x, y, def, c, rng::Key(2));
  auto pred = models::predict(clf, res.adversarial);
  EXPECT_EQ(pred[0], 1);
  EXPECT_EQ(pred[1], 0);  // margin 0.4 > eps
}

TEST(Bpda, MatchesPgdOnIdentityPurifier) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 0), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  auto a = bpda_attack(f.x, f.y, def, c, rng::Key(4));
  auto b = pgd_attack(f.x, f.y, def, c, rng::Key(4));
  ASSERT_EQ(a.iterates.size(), b.iterates.size());
  for (std::size_t i = 0; i < a.iterates.size(); ++i) {
    EXPECT_TRUE(a.iterates[i].bit_equal(b.iterates[i]));
  }
}

TEST(Bpda, GradientIsClassifierGradientAtPurifiedPoint) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 5), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.lambda = 0;
  rng::Key key(4);
  auto d = objective_draw(f.x, f.y, def, c, key, GradMode::kIdentity);
  ad::Tape tape;
  ad::Var v = tape.variable(d.objective.traj.output());
  ad::Var ce = models::cross_entropy(models::classify(tape, f.clf, v), f.y);
  Tensor g = ad::backward(tape, ce, Tensor::full(ce.value().shape(), 1.0)).at(v.id);
  EXPECT_TRUE(d.grad.bit_equal(g));
}

TEST(Spsa, CorrelatesWithQuadraticGradient) {
  rng::Stream st(12, "quad");
  Tensor a = st.uniform_tensor({1, 10}, 0.5, 2.0);
  Tensor x = st.normal_tensor({1, 10});
  auto loss = [&](const Tensor& v, std::size_t) {
    return Tensor::vector({dot(hadamard(a, v), v)});
  };
  Tensor truth = 2.0 * hadamard(a, x);
  double mean_cos = 0;
  for (int rep = 0; rep < 10; ++rep) {
    rng::Stream s(rep, "spsa");
    Tensor g = spsa_gradient(loss, x, 1e-3, 64, s);
    double cos = dot(g, truth) / (norm2(g) * norm2(truth));
    EXPECT_GT(cos, 0.5);
    mean_cos += cos / 10;
  }
  EXPECT_GT(mean_cos, 0.8);
}

TEST(Spsa, DeterministicPerSeed) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 3), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.spsa_samples = 3;
  auto a = spsa_attack(f.x, f.y, def, c, rng::Key(21));
  auto b = spsa_attack(f.x, f.y, def, c, rng::Key(21));
  EXPECT_TRUE(a.adversarial.bit_equal(b.adversarial));
  EXPECT_EQ(a.best_trace, b.best_trace);
}

TEST(Joint, ZeroWeightIsPgd) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 4), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.joint_weight = 0;
  auto p = pgd_attack(f.x, f.y, def, c, rng::Key(5));
  for (auto m : {JointMode::kScore, JointMode::kFull}) {
    auto j = joint_attack(m, f.x, f.y, def, c, rng::Key(5));
    ASSERT_EQ(j.iterates.size(), p.iterates.size());
    for (std::size_t i = 0; i < p.iterates.size(); ++i) {
      EXPECT_TRUE(j.iterates[i].bit_equal(p.iterates[i]));
    }
  }
}

TEST(Joint, FullScoreWeightIgnoresClassifier) {
  Fixture f, g(7);
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 4), f.net);
  Defense d1{pur, f.clf}, d2{pur, g.clf};
  AttackConfig c = small_attack();
  c.joint_weight = 1;
  auto a = joint_attack(JointMode::kScore, f.x, f.y, d1, c, rng::Key(5));
  auto b = joint_attack(JointMode::kScore, f.x, f.y, d2, c, rng::Key(5));
  for (std::size_t i = 0; i < a.iterates.size(); ++i) {
    EXPECT_TRUE(a.iterates[i].bit_equal(b.iterates[i]));
  }
}

TEST(Joint, ScoreModeNeedsScoreModel) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kDdpm, 4), f.net);
  Defense def{pur, f.clf};
  EXPECT_THROW(joint_attack(JointMode::kScore, f.x, f.y, def, small_attack(),
                            rng::Key(1)),
               std::invalid_argument);
  EXPECT_NO_THROW(joint_attack(JointMode::kFull, f.x, f.y, def, small_attack(),
                               rng::Key(1)));
}

TEST(Adjoint, MatchesCheckpointingOnLinearDrift) {
  Fixture f;
  auto cfg = purifier_config(PurifierKind::kVpsde, 8);
  cfg.schedule = diffusion::linear_schedule(20, 1e-6, 2e-6);
  diffusion::EpsFn linear = [](ad::Tape&, ad::Var x, std::span<const double>) {
    return ad::scale(x, 0.3);
  };
  diffusion::Purifier pur(cfg, linear);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.lambda = 0;
  for (int s = 0; s < 5; ++s) {
    rng::Key key(s, "adj");
    Tensor adj = adjoint_gradient(f.x, f.y, def, key);
    Tensor seg = objective_draw(f.x, f.y, def, c, key, GradMode::kSegmentwise).grad;
    EXPECT_LE(norm2(adj - seg) / norm2(seg), 1e-6);
  }
}

TEST(Adjoint, IdentityChainGivesSeedGradient) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 0), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  rng::Key key(2);
  Tensor adj = adjoint_gradient(f.x, f.y, def, key);
  auto d = objective_draw(f.x, f.y, def, c, key, GradMode::kIdentity);
  EXPECT_TRUE(adj.bit_equal(d.grad));
}

TEST(Adjoint, RefiningGridShrinksDiscrepancy) {
  Fixture f;
  AttackConfig c = small_attack();
  c.lambda = 0;
  auto discrepancy = [&](std::size_t T) {
    auto cfg = purifier_config(PurifierKind::kVpsde, T / 2, T);
    cfg.schedule = diffusion::linear_schedule(T, 0.1 / T, 8.0 / T);
    diffusion::Purifier pur(cfg, f.net);
    Defense def{pur, f.clf};
    double acc = 0;
    for (int s = 0; s < 8; ++s) {
      rng::Key key(s, "grid");
      Tensor adj = adjoint_gradient(f.x, f.y, def, key);
      Tensor seg =
          objective_draw(f.x, f.y, def, c, key, GradMode::kSegmentwise).grad;
      acc += norm2(adj - seg) / norm2(seg);
    }
    return acc / 8;
  };
  double coarse = discrepancy(10), fine = discrepancy(40);
  EXPECT_GT(coarse, 0.0);
  EXPECT_LT(fine, coarse);
}

TEST(Adjoint, RejectsDdpm) {
  Fixture f;
  diffusion::Purifier pur(purifier_config(PurifierKind::kDdpm, 3), f.net);
  Defense def{pur, f.clf};
  EXPECT_THROW(adjoint_gradient(f.x, f.y, def, rng::Key(1)), std::invalid_argument);
}

TEST(RobustAccuracy, ZeroBudgetEqualsCleanAccuracy) {
  Fixture f(5, 6);
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 4), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  c.eps = 0;
  rng::Key key(13, "ra");
  auto clean = majority_eval(f.x, f.y, def, 5, key.child("eval"));
  for (const char* name : {"diffattack", "pgd", "bpda"}) {
    auto ra = robust_accuracy(f.x, f.y, attack_by_name(name), def, c, 5, key);
    EXPECT_EQ(ra.accuracy, clean.accuracy);
    EXPECT_EQ(ra.correct, clean.correct);
  }
}

TEST(RobustAccuracy, RangeAndOracleMisclassifier) {
  Fixture f(5, 6);
  diffusion::Purifier pur(purifier_config(PurifierKind::kVpsde, 4), f.net);
  Defense def{pur, f.clf};
  AttackConfig c = small_attack();
  AttackResult out;
  auto ra = robust_accuracy(f.x, f.y, diffattack, def, c, 3, rng::Key(1), &out);
  EXPECT_GE(ra.accuracy, 0.0);
  EXPECT_LE(ra.accuracy, 1.0);
  EXPECT_EQ(out.adversarial.shape(), f.x.shape());

  // Constant logits favour class 2; every label is 0 or 1.
  auto bad = models::zero_classifier(2, {4}, 3);
  bad.biases.back() = Tensor::vector({0.0, 0.0, 1.0});
  Defense def2{pur, bad};
  std::vector<int> y(6, 0);
  for (std::size_t i = 0; i < 6; i += 2) y[i] = 1;
  EXPECT_EQ(robust_accuracy(f.x, y, pgd_attack, def2, c, 3, rng::Key(1)).accuracy,
            0.0);
  EXPECT_THROW(majority_eval(f.x, y, def2, 0, rng::Key(1)), std::invalid_argument);
}

TEST(Config, Validation) {
  AttackConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.apgd_step(), 2 * c.eps);
  EXPECT_EQ(c.n_iter, 100);
  EXPECT_EQ(c.halving_points(), (std::vector<int>{22, 44, 66, 88}));
  c.n_iter = 40;
  EXPECT_EQ(c.halving_points(), (std::vector<int>{8, 17, 26, 35}));
  c.eps = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.n_iter = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.eot = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_norm("l2"), Norm::kL2);
  EXPECT_THROW(parse_norm("l1"), std::invalid_argument);
}

}  // namespace
}  // namespace dpa::attack
