// SPDX-License-Identifier: Apache-2.0

#include <string>

#include "dpa/harness.hpp"

namespace dpa::harness {

SeedModels prepare_seed(const BenchConfig& cfg, std::uint64_t seed) {
  SeedModels m;
  m.seed = seed;
  m.train = gen_dataset(cfg.dataset_spec(seed, true));
  m.test = gen_dataset(cfg.dataset_spec(seed, false)).head(cfg.n_test);

  TrainConfig dt = cfg.diffusion_train;
  dt.seed = seed;
  m.diffusion = train_diffusion(m.train, cfg.schedule(), dt);
  TrainConfig ct = cfg.classifier_train;
  ct.seed = seed;
  m.classifier = train_classifier(m.train, ct);
  return m;
}

SeedRun run_seed(const BenchConfig& cfg, const SeedModels& m, std::size_t t_star,
                 const attack::AttackConfig& acfg,
                 const std::vector<std::string>& attacks) {
  const Dataset eval = m.test.head(cfg.n_eval);
  diffusion::Purifier purifier(cfg.purifier_config(t_star), m.diffusion.params);
  attack::Defense def{purifier, m.classifier.params};
  const rng::Key key(m.seed, "bench/t_star=" + std::to_string(t_star));

  SeedRun run;
  run.seed = m.seed;
  run.t_star = t_star;
  auto clean = attack::majority_eval(eval.x, eval.y, def, cfg.n_eval_draws,
                                     key.child("clean"));
  run.clean_accuracy = clean.accuracy;
  run.clean_correct = clean.correct;
  for (const auto& name : attacks) {
    attack::AttackResult res;
    auto ev = attack::robust_accuracy(eval.x, eval.y, attack::attack_by_name(name),
                                      def, acfg, cfg.n_eval_draws,
                                      key.child("attack=" + name), &res);
    AttackOutcome o;
    o.attack = name;
    o.robust_accuracy = ev.accuracy;
    o.correct = ev.correct;
    double s = 0;
    for (double l : res.best_loss) s += l;
    o.mean_best_loss = s / static_cast<double>(res.best_loss.size());
    run.attacks.push_back(std::move(o));
  }
  return run;
}

namespace {

std::vector<int> as_ints(const std::vector<bool>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

Json to_json(const SeedRun& r) {
  Json attacks = Json::array();
  for (const auto& a : r.attacks) {
    attacks.push_back({{"attack", a.attack},
                       {"robust_acc", a.robust_accuracy},
                       {"mean_best_loss", a.mean_best_loss},
                       {"correct", as_ints(a.correct)}});
  }
  return Json{{"seed", r.seed},
              {"t_star", r.t_star},
              {"clean_acc", r.clean_accuracy},
              {"clean_correct", as_ints(r.clean_correct)},
              {"attacks", attacks}};
}

MemPoint measure_memory(std::size_t t, std::size_t rows, double fullgraph_budget,
                        std::uint64_t seed) {
  if (t < 1) throw ConfigError("memcheck: T must be >= 1");
  rng::Stream st(seed, "memcheck/init");
  auto net = models::init_mlp(2, {64, 64}, 16, st);
  diffusion::PurifierConfig pc;
  pc.kind = diffusion::PurifierKind::kVpsde;
  pc.t_star = t;
  pc.schedule = diffusion::linear_schedule(t, 1e-3, 5e-2);
  diffusion::Purifier pur(pc, net);
  Tensor x = st.uniform_tensor({rows, 2}, 0, 1);
  auto traj = pur.purify(x, rng::Key(seed, "memcheck"));
  Tensor seed_grad = Tensor::full(x.shape(), 1.0);

  MemPoint p;
  p.t = t;
  p.sample_bytes = traj.chain.sample_bytes();
  ad::MemoryMeter seg;
  ckpt::segmentwise_backward(traj.chain, seed_grad, {}, &seg);
  p.graph_peak_bytes = ckpt::peak_live_bytes(seg);
  // The full graph holds every step at once, so its size is about one
  // segment's peak per step.
  double estimate = static_cast<double>(p.graph_peak_bytes) *
                    static_cast<double>(traj.chain.size());
  if (estimate <= fullgraph_budget) {
    ad::MemoryMeter full;
    ckpt::fullgraph_backward(traj.chain, seed_grad, {}, &full);
    p.fullgraph_peak_bytes = ckpt::peak_live_bytes(full);
  }
  return p;
}

}  // namespace dpa::harness
