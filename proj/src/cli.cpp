// SPDX-License-Identifier: Apache-2.0

#include <charconv>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <functional>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "dpa/harness.hpp"
#include "dpa/theory.hpp"

namespace dpa::harness {

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

struct Options {
  std::string config;
  std::string out;
  std::string csv;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool timing = false;

  // Subcommand-specific.
  std::vector<std::string> attacks;
  std::string sweep_attack = "diffattack";
  std::vector<std::size_t> t_values;
  std::size_t rows = 64;
  std::string models_dir;
  std::string split = "train";
};

BenchConfig load_config(const Options& o, Json& snapshot) {
  Json j = o.config.empty() ? Json::object() : read_json_file(o.config);
  for (const auto& s : o.sets) apply_override(j, s);
  if (o.seed) {
    j["seed"] = *o.seed;
    j["seeds"] = Json::array({*o.seed});
  }
  BenchConfig cfg = bench_from_json(j);
  snapshot = to_json(cfg);
  return cfg;
}

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Json new_record(const std::string& command, const Json& config, const Json& args) {
  Json inputs{{"command", command}, {"config", config}, {"args", args}};
  return Json{{"format_version", kFormatVersion},
              {"command", command},
              {"config", config},
              {"args", args},
              {"input_hash", content_hash(inputs)}};
}

void emit(const Options& o, Json& rec, const Clock& clock, const Csv* csv) {
  if (o.timing) rec["timing"] = {{"wall_seconds", clock.seconds()}};
  if (!o.out.empty()) write_text_file(o.out, canonical_dump(rec));
  if (csv && !o.csv.empty()) write_text_file(o.csv, csv->str());
}

void progress(const std::string& msg) { std::fprintf(stderr, "[dpa] %s\n", msg.c_str()); }

SeedModels models_for(const BenchConfig& cfg, std::uint64_t seed, const Options& o) {
  if (o.models_dir.empty()) {
    progress("training models for seed " + std::to_string(seed));
    return prepare_seed(cfg, seed);
  }
  SeedModels m;
  m.seed = seed;
  std::filesystem::path dir(o.models_dir);
  m.diffusion = load_diffusion_checkpoint(dir / "diffusion.json");
  m.classifier = load_classifier_checkpoint(dir / "classifier.json");
  m.test = gen_dataset(cfg.dataset_spec(seed, false)).head(cfg.n_test);
  return m;
}

Json memory_json(const BenchConfig& cfg, std::size_t t_star) {
  MemPoint mp = measure_memory(std::max<std::size_t>(t_star, 1),
                               std::min<std::size_t>(cfg.n_eval, 256), 0.0, cfg.seed);
  return {{"t", mp.t},
          {"graph_peak_bytes", mp.graph_peak_bytes},
          {"sample_bytes", mp.sample_bytes}};
}

// Sweep over values of one attack-config knob, diffattack (or --attack) at
// each point.
template <typename T>
int run_sweep(const Options& o, const std::string& command, const std::string& column,
              const std::function<std::vector<T>(const BenchConfig&)>& values_of,
              const std::function<void(const T&, std::size_t&, attack::AttackConfig&)>&
                  configure,
              const std::function<std::string(const T&)>& label) {
  Clock clock;
  Json snapshot;
  BenchConfig cfg = load_config(o, snapshot);
  const std::vector<T> values = values_of(cfg);
  attack::attack_by_name(o.sweep_attack);
  Json rec = new_record(command, snapshot, {{"attack", o.sweep_attack}});

  std::vector<std::vector<double>> clean(values.size()), robust(values.size()),
      loss(values.size());
  Json memory = Json::array();
  Json points = Json::array();
  for (auto seed : cfg.seeds) {
    SeedModels m = models_for(cfg, seed, o);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::size_t t_star = cfg.t_star;
      attack::AttackConfig acfg = cfg.attack;
      configure(values[i], t_star, acfg);
      if (t_star > cfg.schedule_T) throw ConfigError(command + ": T* exceeds T");
      SeedRun r = run_seed(cfg, m, t_star, acfg, {o.sweep_attack});
      clean[i].push_back(r.clean_accuracy);
      robust[i].push_back(r.attacks.front().robust_accuracy);
      loss[i].push_back(r.attacks.front().mean_best_loss);
      if (seed == cfg.seeds.front()) memory.push_back(memory_json(cfg, t_star));
      Json p = to_json(r);
      p[column] = label(values[i]);
      points.push_back(p);
      progress(command + " seed " + std::to_string(seed) + " " + column + "=" +
               label(values[i]) + " clean " + num(r.clean_accuracy) + " robust " +
               num(r.attacks.front().robust_accuracy));
    }
  }
  Csv csv({column, "clean_acc", "robust_acc", "drop"});
  Json agg = Json::array();
  std::printf("%-14s %10s %10s %10s\n", column.c_str(), "clean", "robust", "drop");
  for (std::size_t i = 0; i < values.size(); ++i) {
    double c = mean(clean[i]), r = mean(robust[i]);
    csv.row({label(values[i]), num(c), num(r), num(c - r)});
    agg.push_back({{column, label(values[i])},
                   {"clean_acc", c},
                   {"robust_acc", r},
                   {"drop", c - r},
                   {"mean_best_loss", mean(loss[i])}});
    std::printf("%-14s %10.4f %10.4f %10.4f\n", label(values[i]).c_str(), c, r, c - r);
  }
  rec["points"] = points;
  rec["aggregate"] = agg;
  emit(o, rec, clock, &csv);
  return 0;
}

int cmd_attack(const Options& o) {
  Clock clock;
  Json snapshot;
  BenchConfig cfg = load_config(o, snapshot);
  std::vector<std::string> attacks = o.attacks.empty() ? cfg.attacks : o.attacks;
  for (const auto& a : attacks) attack::attack_by_name(a);
  Json rec = new_record("attack", snapshot, {{"attacks", attacks}});

  Json points = Json::array();
  std::vector<double> clean;
  std::map<std::string, std::vector<double>> robust, best_loss;
  Csv csv({"seed", "attack", "clean_acc", "robust_acc"});
  for (auto seed : cfg.seeds) {
    SeedModels m = models_for(cfg, seed, o);
    SeedRun r = run_seed(cfg, m, cfg.t_star, cfg.attack, attacks);
    clean.push_back(r.clean_accuracy);
    for (const auto& a : r.attacks) {
      robust[a.attack].push_back(a.robust_accuracy);
      best_loss[a.attack].push_back(a.mean_best_loss);
      csv.row({std::to_string(seed), a.attack, num(r.clean_accuracy),
               num(a.robust_accuracy)});
    }
    points.push_back(to_json(r));
    progress("attack seed " + std::to_string(seed) + " done");
  }
  Json agg{{"clean_acc", mean(clean)},
           {"robust_acc", Json::object()},
           {"mean_best_loss", Json::object()}};
  std::printf("%-14s %10s\n", "attack", "accuracy");
  std::printf("%-14s %10.4f\n", "(clean)", mean(clean));
  for (const auto& a : attacks) {
    agg["robust_acc"][a] = mean(robust[a]);
    agg["mean_best_loss"][a] = mean(best_loss[a]);
    std::printf("%-14s %10.4f\n", a.c_str(), mean(robust[a]));
  }
  rec["memory"] = memory_json(cfg, cfg.t_star);
  rec["points"] = points;
  rec["aggregate"] = agg;
  emit(o, rec, clock, &csv);
  return 0;
}

int cmd_memcheck(const Options& o) {
  Clock clock;
  Json snapshot;
  BenchConfig cfg = load_config(o, snapshot);
  auto ts = o.t_values.empty() ? cfg.mem_t_values : o.t_values;
  Json rec = new_record("memcheck", snapshot, {{"t_values", ts}, {"rows", o.rows}});
  Csv csv({"t", "graph_peak_bytes", "sample_bytes", "fullgraph_peak_bytes"});
  Json points = Json::array();
  std::printf("%8s %18s %14s %22s\n", "t", "graph_peak_bytes", "sample_bytes",
              "fullgraph_peak_bytes");
  for (auto t : ts) {
    MemPoint p = measure_memory(t, o.rows, cfg.fullgraph_budget_bytes, cfg.seed);
    std::string full = p.fullgraph_peak_bytes ? std::to_string(*p.fullgraph_peak_bytes)
                                              : "skipped";
    csv.row({std::to_string(t), std::to_string(p.graph_peak_bytes),
             std::to_string(p.sample_bytes), full});
    points.push_back({{"t", t},
                      {"graph_peak_bytes", p.graph_peak_bytes},
                      {"sample_bytes", p.sample_bytes},
                      {"fullgraph_peak_bytes", p.fullgraph_peak_bytes
                                                   ? Json(*p.fullgraph_peak_bytes)
                                                   : Json("skipped")}});
    std::printf("%8zu %18zu %14zu %22s\n", t, p.graph_peak_bytes, p.sample_bytes,
                full.c_str());
  }
  rec["points"] = points;
  emit(o, rec, clock, &csv);
  return 0;
}

int cmd_theory(const Options& o) {
  Clock clock;
  Json snapshot;
  load_config(o, snapshot);
  const theory::PilotConfig pc;
  auto rep = theory::gaussian_pilot(pc);
  Json rec = new_record("theory-check", snapshot,
                        {{"deltas", pc.deltas},
                         {"ts", pc.ts},
                         {"box_radius", pc.box_radius},
                         {"schedule_betas", pc.schedule.betas()}});
  Csv csv({"delta", "t", "lhs", "rhs", "sm_loss", "M"});
  Json grid = Json::array();
  for (const auto& p : rep.points) {
    csv.row({num(p.delta), std::to_string(p.t), num(p.lhs), num(p.rhs), num(p.sm_loss),
             num(p.M)});
    grid.push_back({{"delta", p.delta},
                    {"t", p.t},
                    {"lhs", p.lhs},
                    {"rhs", p.rhs},
                    {"sm_loss", p.sm_loss},
                    {"M", p.M}});
  }
  auto t3 = theory::theorem3_constants(pc.schedule, 2);
  rec["grid"] = grid;
  rec["violations"] = rep.violations;
  rec["theorem3_t2"] = {{"C1", t3.C1}, {"C2", t3.C2}, {"lambda", t3.lambda_table}};
  std::printf("pilot grid points: %zu, violations: %zu\n", rep.points.size(),
              rep.violations);
  emit(o, rec, clock, &csv);
  return 0;
}

int cmd_train(const Options& o) {
  Clock clock;
  Json snapshot;
  BenchConfig cfg = load_config(o, snapshot);
  if (o.models_dir.empty()) throw ConfigError("train: --models-dir is required");
  const std::uint64_t seed = cfg.seeds.front();
  SeedModels m = prepare_seed(cfg, seed);
  std::filesystem::path dir(o.models_dir);
  save_checkpoint(m.diffusion, dir / "diffusion.json");
  save_checkpoint(m.classifier, dir / "classifier.json");
  Json rec = new_record("train", snapshot, {{"seed", seed}});
  double train_acc = accuracy(m.classifier.params, m.train);
  double test_acc = accuracy(m.classifier.params, m.test);
  rec["diffusion"] = {{"initial_loss", m.diffusion.meta.initial_loss},
                      {"final_loss", m.diffusion.meta.final_loss},
                      {"checkpoint_hash", content_hash(to_json(m.diffusion))}};
  rec["classifier"] = {{"final_loss", m.classifier.meta.final_loss},
                       {"train_acc", train_acc},
                       {"test_acc", test_acc},
                       {"checkpoint_hash", content_hash(to_json(m.classifier))}};
  Csv csv({"model", "step", "loss"});
  auto curve = [&](const char* name, const TrainMeta& meta, int every) {
    for (std::size_t i = 0; i < meta.loss_curve.size(); ++i) {
      csv.row({name, std::to_string(std::min<int>(static_cast<int>(i + 1) * every,
                                                  meta.steps)),
               num(meta.loss_curve[i])});
    }
  };
  curve("diffusion", m.diffusion.meta, cfg.diffusion_train.log_every);
  curve("classifier", m.classifier.meta, cfg.classifier_train.log_every);
  std::printf("diffusion loss %.4f -> %.4f; classifier train %.4f test %.4f\n",
              m.diffusion.meta.initial_loss, m.diffusion.meta.final_loss, train_acc,
              test_acc);
  emit(o, rec, clock, &csv);
  return 0;
}

int cmd_gen_data(const Options& o) {
  Clock clock;
  Json snapshot;
  BenchConfig cfg = load_config(o, snapshot);
  if (o.split != "train" && o.split != "test") {
    throw ConfigError("gen-data: --split must be train or test");
  }
  const std::uint64_t seed = cfg.seeds.front();
  bool train = o.split == "train";
  Dataset d = gen_dataset(cfg.dataset_spec(seed, train));
  if (!train) d = d.head(cfg.n_test);
  const std::size_t w = d.x.dim(1);
  std::vector<std::string> header;
  for (std::size_t j = 0; j < w; ++j) header.push_back("x" + std::to_string(j));
  header.push_back("label");
  Csv csv(header);
  std::vector<std::size_t> counts(cfg.num_classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<std::string> cells;
    for (std::size_t j = 0; j < w; ++j) cells.push_back(num(d.x.at(i, j)));
    cells.push_back(std::to_string(d.y[i]));
    csv.row(cells);
    ++counts[static_cast<std::size_t>(d.y[i])];
  }
  Json rec = new_record("gen-data", snapshot, {{"split", o.split}, {"seed", seed}});
  rec["n_points"] = d.size();
  rec["class_counts"] = counts;
  rec["data_hash"] = content_hash(Json(std::vector<double>(d.x.data().begin(),
                                                           d.x.data().end())));
  std::printf("%s split: %zu points\n", o.split.c_str(), d.size());
  emit(o, rec, clock, &csv);
  return 0;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON config file");
  sub->add_option("--out", o.out, "RunRecord JSON output path");
  sub->add_option("--csv", o.csv, "CSV output path");
  sub->add_option("--seed", o.seed, "run a single seed");
  sub->add_option("--set", o.sets, "override a config key, e.g. attack.eps=0.1");
  sub->add_flag("--timing", o.timing, "record wall-clock time");
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Diffusion-purification attack toolkit", "dpa"};
  app.require_subcommand(1);
  Options o;

  auto* attack_cmd = app.add_subcommand("attack", "clean and robust accuracy per attack");
  add_common(attack_cmd, o);
  attack_cmd->add_option("--attacks", o.attacks, "attacks to run")->delimiter(',');
  attack_cmd->add_option("--models-dir", o.models_dir, "load checkpoints instead of training");

  auto* ablate_t = app.add_subcommand("ablate-t", "sweep the diffusion length T*");
  auto* ablate_steps = app.add_subcommand("ablate-steps", "sweep deviated-loss time steps");
  auto* ablate_lambda = app.add_subcommand("ablate-lambda", "sweep the deviated-loss weight");
  for (auto* s : {ablate_t, ablate_steps, ablate_lambda}) {
    add_common(s, o);
    s->add_option("--attack", o.sweep_attack, "attack evaluated at each point");
    s->add_option("--models-dir", o.models_dir, "load checkpoints instead of training");
  }

  auto* mem = app.add_subcommand("memcheck", "peak graph memory versus chain length");
  add_common(mem, o);
  mem->add_option("--t-values", o.t_values, "chain lengths")->delimiter(',');
  mem->add_option("--rows", o.rows, "batch rows");

  auto* theory_cmd = app.add_subcommand("theory-check", "analytic check of the TV bound");
  add_common(theory_cmd, o);

  auto* train = app.add_subcommand("train", "train and save both models for one seed");
  add_common(train, o);
  train->add_option("--models-dir", o.models_dir, "checkpoint directory");

  auto* gen = app.add_subcommand("gen-data", "write a dataset as CSV");
  add_common(gen, o);
  gen->add_option("--split", o.split, "train or test");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(std::move(rev));
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    if (code == 0) return 0;
    const CLI::App* shown = &app;
    for (const auto* sub : app.get_subcommands()) shown = sub;
    std::cerr << shown->help();
    return 1;
  }

  try {
    if (attack_cmd->parsed()) return cmd_attack(o);
    if (ablate_t->parsed()) {
      return run_sweep<std::size_t>(
          o, "ablate-t", "t_star",
          [](const BenchConfig& c) { return c.sweep_t_star; },
          [](const std::size_t& v, std::size_t& t, attack::AttackConfig&) { t = v; },
          [](const std::size_t& v) { return std::to_string(v); });
    }
    if (ablate_steps->parsed()) {
      return run_sweep<std::string>(
          o, "ablate-steps", "timesteps",
          [](const BenchConfig& c) { return c.sweep_timesteps; },
          [](const std::string& v, std::size_t&, attack::AttackConfig& a) {
            a.timesteps = attack::parse_timesteps(v);
          },
          [](const std::string& v) { return v; });
    }
    if (ablate_lambda->parsed()) {
      return run_sweep<double>(
          o, "ablate-lambda", "lambda",
          [](const BenchConfig& c) { return c.sweep_lambda; },
          [](const double& v, std::size_t&, attack::AttackConfig& a) { a.lambda = v; },
          [](const double& v) { return num(v); });
    }
    if (mem->parsed()) return cmd_memcheck(o);
    if (theory_cmd->parsed()) return cmd_theory(o);
    if (train->parsed()) return cmd_train(o);
    if (gen->parsed()) return cmd_gen_data(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid argument: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace dpa::harness
