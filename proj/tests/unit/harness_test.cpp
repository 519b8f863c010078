// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <gtest/gtest.h>

#include "dpa/harness.hpp"

namespace dpa::harness {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dpa_harness_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::memcmp(&x[i], &y[i], sizeof(double)) != 0) return false;
  }
  return true;
}

template <typename P>
bool same_params(const P& a, const P& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!same_bits(*ta[i], *tb[i])) return false;
  }
  return true;
}

DatasetSpec blobs(std::size_t n, double noise, std::uint64_t seed = 0) {
  DatasetSpec s;
  s.kind = DatasetKind::kBlobs;
  s.n_points = n;
  s.noise = noise;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------
// Datasets

TEST(Dataset, BlobsBalanced) {
  Dataset d = gen_dataset(blobs(100, 0.05));
  ASSERT_EQ(d.size(), 100u);
  int ones = 0;
  for (int y : d.y) ones += y;
  EXPECT_EQ(ones, 50);
}

TEST(Dataset, BalancedWithinOneForEveryKind) {
  for (auto kind : {DatasetKind::kMoons, DatasetKind::kBlobs, DatasetKind::kRings}) {
    for (std::size_t k : {2u, 3u, 5u}) {
      if (kind == DatasetKind::kMoons && k != 2) continue;
      DatasetSpec s = blobs(101, 0.05);
      s.kind = kind;
      s.num_classes = k;
      Dataset d = gen_dataset(s);
      std::vector<int> counts(k, 0);
      for (int y : d.y) ++counts[static_cast<std::size_t>(y)];
      auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
      EXPECT_LE(*hi - *lo, 1) << dataset_kind_name(kind) << " k=" << k;
      for (double v : d.x.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(Dataset, SameSeedSameBytes) {
  auto a = gen_dataset(blobs(64, 0.1, 7));
  auto b = gen_dataset(blobs(64, 0.1, 7));
  auto c = gen_dataset(blobs(64, 0.1, 8));
  EXPECT_TRUE(same_bits(a.x, b.x));
  EXPECT_EQ(a.y, b.y);
  EXPECT_FALSE(same_bits(a.x, c.x));
}

// Logistic regression by plain gradient descent, independent of the library.
TEST(Dataset, LinearProbeSeparatesBlobs) {
  Dataset tr = gen_dataset(blobs(400, 0.05, 0));
  Dataset te = gen_dataset(blobs(400, 0.05, 1));
  double w0 = 0, w1 = 0, b = 0;
  for (int it = 0; it < 2000; ++it) {
    double g0 = 0, g1 = 0, gb = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      double z = w0 * tr.x.at(i, 0) + w1 * tr.x.at(i, 1) + b;
      double p = 1.0 / (1.0 + std::exp(-z));
      double r = p - tr.y[i];
      g0 += r * tr.x.at(i, 0);
      g1 += r * tr.x.at(i, 1);
      gb += r;
    }
    const double lr = 1.0 / static_cast<double>(tr.size());
    w0 -= 5 * lr * g0;
    w1 -= 5 * lr * g1;
    b -= 5 * lr * gb;
  }
  int ok = 0;
  for (std::size_t i = 0; i < te.size(); ++i) {
    double z = w0 * te.x.at(i, 0) + w1 * te.x.at(i, 1) + b;
    ok += (z > 0) == (te.y[i] == 1);
  }
  EXPECT_GE(ok / static_cast<double>(te.size()), 0.9);
}

TEST(Dataset, CodeCoordinates) {
  DatasetSpec s = blobs(40, 0.05);
  s.data_dim = 6;
  s.code_scale = 0.02;
  Dataset d = gen_dataset(s);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 2; j < 6; ++j) {
      EXPECT_NEAR(std::abs(d.x.at(i, j) - 0.5), 0.02, 1e-15);
      // Same code for every point of a class, across seeds.
      EXPECT_EQ(d.x.at(i, j), d.x.at(i % 2, j));
    }
  }
  s.seed = 9;
  Dataset e = gen_dataset(s);
  for (std::size_t j = 2; j < 6; ++j) EXPECT_EQ(d.x.at(0, j), e.x.at(0, j));
}

TEST(Dataset, InvalidSpecs) {
  EXPECT_THROW(parse_dataset_kind("spirals"), ConfigError);
  DatasetSpec s = blobs(3, 0.05);
  EXPECT_THROW(gen_dataset(s), ConfigError);  // fewer than 2 * classes
  s = blobs(10, 0.05);
  s.kind = DatasetKind::kMoons;
  s.num_classes = 3;
  EXPECT_THROW(gen_dataset(s), ConfigError);
  s = blobs(10, -1.0);
  EXPECT_THROW(gen_dataset(s), ConfigError);
}

// ---------------------------------------------------------------------------
// Training

TEST(Training, DiffusionLossHalves) {
  Dataset d = gen_dataset(blobs(512, 0.05));
  TrainConfig cfg;
  cfg.steps = 2000;
  auto ck = train_diffusion(d, diffusion::linear_schedule(50, 1e-3, 5e-2), cfg);
  ASSERT_FALSE(ck.meta.loss_curve.empty());
  EXPECT_LT(ck.meta.final_loss, 0.5 * ck.meta.initial_loss);
  EXPECT_EQ(ck.meta.loss_curve.size(), 20u);
}

TEST(Training, ZeroStepsKeepsInit) {
  Dataset d = gen_dataset(blobs(32, 0.05));
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 3;
  auto ck = train_diffusion(d, diffusion::linear_schedule(10, 1e-3, 5e-2), cfg);
  rng::Stream init(3, "train/diffusion/init");
  auto ref = models::init_mlp(2, cfg.hidden, cfg.time_embed_dim, init);
  EXPECT_TRUE(same_params(ck.params, ref));
  EXPECT_TRUE(ck.meta.loss_curve.empty());
}

TEST(Training, DeterministicCheckpointBytes) {
  Dataset d = gen_dataset(blobs(64, 0.05));
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.log_every = 10;
  auto s = diffusion::linear_schedule(10, 1e-3, 5e-2);
  auto a = canonical_dump(to_json(train_diffusion(d, s, cfg)));
  auto b = canonical_dump(to_json(train_diffusion(d, s, cfg)));
  EXPECT_EQ(a, b);
  auto c1 = canonical_dump(to_json(train_classifier(d, cfg)));
  auto c2 = canonical_dump(to_json(train_classifier(d, cfg)));
  EXPECT_EQ(c1, c2);
  cfg.seed = 1;
  EXPECT_NE(a, canonical_dump(to_json(train_diffusion(d, s, cfg))));
}

TEST(Training, DivergenceNamesStep) {
  Dataset d = gen_dataset(blobs(8, 0.05));
  d.x.mutable_data()[0] = std::nan("");
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 8;
  try {
    train_classifier(d, cfg);
    FAIL() << "expected divergence";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("step "), std::string::npos) << e.what();
  }
  EXPECT_THROW(train_diffusion(d, diffusion::linear_schedule(10, 1e-3, 5e-2), cfg),
               std::runtime_error);
}

TEST(Training, ClassifierAccuracy) {
  Dataset tr = gen_dataset(blobs(512, 0.05, 0));
  Dataset te = gen_dataset(blobs(256, 0.05, 1));
  TrainConfig cfg;
  auto ck = train_classifier(tr, cfg);
  EXPECT_GE(accuracy(ck.params, tr), 0.95);
  EXPECT_GE(accuracy(ck.params, te), 0.95);
}

TEST(Training, WrongDimRejected) {
  Dataset tr = gen_dataset(blobs(32, 0.05));
  TrainConfig cfg;
  cfg.steps = 1;
  auto ck = train_classifier(tr, cfg);
  DatasetSpec s = blobs(32, 0.05);
  s.data_dim = 3;
  EXPECT_THROW(accuracy(ck.params, gen_dataset(s)), ShapeError);
}

TEST(Training, BadConfig) {
  Dataset d = gen_dataset(blobs(8, 0.05));
  TrainConfig cfg;
  cfg.batch = 0;
  EXPECT_THROW(train_classifier(d, cfg), ConfigError);
  cfg = {};
  cfg.lr = 0;
  EXPECT_THROW(train_classifier(d, cfg), ConfigError);
}

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Dataset d = gen_dataset(blobs(64, 0.05));
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.log_every = 5;
    diff_ = train_diffusion(d, diffusion::linear_schedule(12, 1e-3, 5e-2), cfg);
    clf_ = train_classifier(d, cfg);
    dir_ = temp_dir("ckpt");
  }

  DiffusionCheckpoint diff_;
  ClassifierCheckpoint clf_;
  fs::path dir_;
};

TEST_F(CheckpointTest, RoundTripBitwise) {
  save_checkpoint(diff_, dir_ / "d.json");
  save_checkpoint(clf_, dir_ / "c.json");
  auto d = load_diffusion_checkpoint(dir_ / "d.json");
  auto c = load_classifier_checkpoint(dir_ / "c.json");
  EXPECT_TRUE(same_params(d.params, diff_.params));
  EXPECT_TRUE(same_params(c.params, clf_.params));
  EXPECT_EQ(d.schedule.betas(), diff_.schedule.betas());
  EXPECT_EQ(d.meta.loss_curve, diff_.meta.loss_curve);
  EXPECT_EQ(d.meta.final_loss, diff_.meta.final_loss);
  // Saving again reproduces the file.
  save_checkpoint(d, dir_ / "d2.json");
  EXPECT_EQ(slurp(dir_ / "d.json"), slurp(dir_ / "d2.json"));
}

TEST_F(CheckpointTest, TruncatedFileReportsOffset) {
  save_checkpoint(diff_, dir_ / "d.json");
  std::string text = slurp(dir_ / "d.json");
  write_text_file(dir_ / "t.json", text.substr(0, text.size() / 2));
  try {
    load_diffusion_checkpoint(dir_ / "t.json");
    FAIL() << "expected parse error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
}

TEST_F(CheckpointTest, VersionBumpRejected) {
  Json j = to_json(diff_);
  j["format_version"] = kFormatVersion + 1;
  write_text_file(dir_ / "v.json", canonical_dump(j));
  try {
    load_diffusion_checkpoint(dir_ / "v.json");
    FAIL() << "expected version error";
  } catch (const std::exception& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(kFormatVersion + 1)), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(kFormatVersion)), std::string::npos) << msg;
  }
}

TEST_F(CheckpointTest, WrongModelKindRejected) {
  save_checkpoint(clf_, dir_ / "c.json");
  EXPECT_THROW(load_diffusion_checkpoint(dir_ / "c.json"), std::exception);
  EXPECT_THROW(load_classifier_checkpoint(dir_ / "missing.json"), ConfigError);
}

// ---------------------------------------------------------------------------
// Config and canonical output

TEST(Config, DefaultsRoundTrip) {
  BenchConfig c;
  Json j = to_json(c);
  EXPECT_EQ(canonical_dump(to_json(bench_from_json(j))), canonical_dump(j));
  EXPECT_EQ(canonical_dump(to_json(bench_from_json(Json::object()))),
            canonical_dump(j));
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(bench_from_json(Json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(bench_from_json(Json{{"attack", {{"epsilon", 0.1}}}}), ConfigError);
  EXPECT_THROW(bench_from_json(Json{{"format_version", 99}}), ConfigError);
  EXPECT_THROW(bench_from_json(Json{{"attack", {{"eps", -1.0}}}}), std::invalid_argument);
  EXPECT_THROW(bench_from_json(Json{{"purifier", {{"t_star", 1000}}}}), ConfigError);
}

TEST(Config, Override) {
  Json j = Json::object();
  apply_override(j, "attack.eps=0.25");
  apply_override(j, "dataset.kind=rings");
  apply_override(j, "sweep.t_star=[3,6]");
  BenchConfig c = bench_from_json(j);
  EXPECT_EQ(c.attack.eps, 0.25);
  EXPECT_EQ(c.dataset, DatasetKind::kRings);
  EXPECT_EQ(c.sweep_t_star, (std::vector<std::size_t>{3, 6}));
  EXPECT_THROW(apply_override(j, "no_equals_sign"), ConfigError);
}

// Flips every leaf of the default config and checks the hash moves.
void visit_leaves(Json& node, const std::function<void(Json&)>& f) {
  if (node.is_object()) {
    for (auto& [k, v] : node.items()) visit_leaves(v, f);
  } else if (node.is_array() && !node.empty() && !node.front().is_primitive()) {
    for (auto& v : node) visit_leaves(v, f);
  } else {
    f(node);
  }
}

TEST(Config, HashChangesWithEveryField) {
  const Json base = to_json(BenchConfig{});
  const std::string h0 = content_hash(base);
  std::size_t leaves = 0;
  Json probe = base;
  visit_leaves(probe, [&](Json&) { ++leaves; });
  for (std::size_t target = 0; target < leaves; ++target) {
    Json j = base;
    std::size_t idx = 0;
    visit_leaves(j, [&](Json& leaf) {
      if (idx++ != target) return;
      if (leaf.is_boolean()) {
        leaf = !leaf.get<bool>();
      } else if (leaf.is_number()) {
        leaf = leaf.get<double>() + 1;
      } else if (leaf.is_string()) {
        leaf = leaf.get<std::string>() + "x";
      } else {
        leaf = Json::array({1});
      }
    });
    EXPECT_NE(content_hash(j), h0) << "leaf " << target;
  }
  EXPECT_GT(leaves, 30u);
}

TEST(Canonical, SortedKeysAndNewline) {
  Json j{{"b", 1}, {"a", {{"d", 0.1}, {"c", 2}}}};
  std::string s = canonical_dump(j);
  EXPECT_EQ(s.back(), '\n');
  EXPECT_LT(s.find("\"a\""), s.find("\"b\""));
  EXPECT_LT(s.find("\"c\""), s.find("\"d\""));
  EXPECT_NE(s.find("0.1"), std::string::npos);
  EXPECT_EQ(parse_json(s, "test"), j);
  EXPECT_EQ(content_hash(j).size(), 16u);
}

// ---------------------------------------------------------------------------
// CLI

int cli(std::vector<std::string> args) { return run_cli(args); }

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli({"--help"}), 0);
  EXPECT_EQ(cli({"attack", "--help"}), 0);
  EXPECT_EQ(cli({}), 1);
  EXPECT_EQ(cli({"attack", "--no-such-flag"}), 1);
  EXPECT_EQ(cli({"frobnicate"}), 1);
  EXPECT_EQ(cli({"attack", "--set", "attack.eps=-1"}), 1);
  EXPECT_EQ(cli({"attack", "--config", "/nonexistent/c.json"}), 1);
  auto dir = temp_dir("exit");
  write_text_file(dir / "file", "x");
  // Output under a regular file cannot be created.
  EXPECT_EQ(cli({"theory-check", "--out", (dir / "file" / "sub" / "r.json").string()}), 2);
}

TEST(Cli, GenDataDeterministic) {
  auto dir = temp_dir("gen");
  for (const char* tag : {"a", "b"}) {
    ASSERT_EQ(cli({"gen-data", "--seed", "4", "--set", "dataset.n_train=50",
                   "dataset.data_dim=2", "--out",
                   (dir / (std::string(tag) + ".json")).string(), "--csv",
                   (dir / (std::string(tag) + ".csv")).string()}),
              0);
  }
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  std::string csv = slurp(dir / "a.csv");
  EXPECT_EQ(csv, slurp(dir / "b.csv"));
  EXPECT_EQ(csv.rfind("x0,x1,label\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 51);
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  Json rec = read_json_file(dir / "a.json");
  EXPECT_EQ(rec["n_points"], 50);
  EXPECT_EQ(rec["config"]["seeds"], Json::array({4}));
}

TEST(Cli, TheoryCheckNoViolations) {
  auto dir = temp_dir("theory");
  ASSERT_EQ(cli({"theory-check", "--out", (dir / "r.json").string()}), 0);
  Json rec = read_json_file(dir / "r.json");
  EXPECT_EQ(rec["violations"], 0);
  EXPECT_EQ(rec["command"], "theory-check");
  EXPECT_FALSE(rec.contains("timing"));
  ASSERT_EQ(cli({"theory-check", "--timing", "--out", (dir / "t.json").string()}), 0);
  EXPECT_TRUE(read_json_file(dir / "t.json").contains("timing"));
}

TEST(Cli, MemcheckSkipsOverBudget) {
  auto dir = temp_dir("mem");
  ASSERT_EQ(cli({"memcheck", "--t-values", "4,8", "--rows", "8", "--set",
                 "memcheck.fullgraph_budget_bytes=1", "--csv", (dir / "m.csv").string()}),
            0);
  std::string csv = slurp(dir / "m.csv");
  EXPECT_EQ(csv.rfind("t,graph_peak_bytes,sample_bytes,fullgraph_peak_bytes\n", 0), 0u);
  EXPECT_NE(csv.find(",skipped\n"), std::string::npos);
  ASSERT_EQ(cli({"memcheck", "--t-values", "4", "--rows", "8", "--csv",
                 (dir / "n.csv").string()}),
            0);
  EXPECT_EQ(slurp(dir / "n.csv").find("skipped"), std::string::npos);
}

TEST(Cli, HashFollowsConfig) {
  auto dir = temp_dir("hash");
  ASSERT_EQ(cli({"theory-check", "--out", (dir / "a.json").string()}), 0);
  ASSERT_EQ(cli({"theory-check", "--set", "attack.eps=0.2", "--out",
                 (dir / "b.json").string()}),
            0);
  EXPECT_NE(read_json_file(dir / "a.json")["input_hash"],
            read_json_file(dir / "b.json")["input_hash"]);
}

// A tiny end-to-end attack run: small models, few points.
TEST(Cli, AttackRecordAggregates) {
  auto dir = temp_dir("attack");
  std::vector<std::string> args{
      "attack",         "--seed",
      "0",              "--set",
      "n_eval=6",       "--set",
      "dataset.n_test=6", "--set",
      "dataset.n_train=64", "--set",
      "diffusion_model.steps=20", "--set",
      "classifier.steps=20", "--set",
      "purifier.t_star=3", "--set",
      "attack.n_iter=2", "--set",
      "attack.eot=1",   "--set",
      "n_eval_draws=1", "--set",
      "dataset.data_dim=2", "--set",
      "attack.spsa_samples=2", "--attacks",
      "diffattack,bpda,spsa"};
  auto run = [&](const std::string& tag) {
    auto a = args;
    a.insert(a.end(), {"--out", (dir / (tag + ".json")).string(), "--csv",
                       (dir / (tag + ".csv")).string()});
    return cli(a);
  };
  ASSERT_EQ(run("a"), 0);
  ASSERT_EQ(run("b"), 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  Json rec = read_json_file(dir / "a.json");
  ASSERT_EQ(rec["points"].size(), 1u);
  const Json& p = rec["points"][0];
  for (const auto& a : p["attacks"]) {
    double correct = 0;
    for (int c : a["correct"]) correct += c;
    EXPECT_DOUBLE_EQ(a["robust_acc"].get<double>(), correct / 6.0);
    EXPECT_DOUBLE_EQ(rec["aggregate"]["robust_acc"][a["attack"].get<std::string>()]
                         .get<double>(),
                     a["robust_acc"].get<double>());
  }
  EXPECT_TRUE(rec["memory"].contains("graph_peak_bytes"));
  EXPECT_TRUE(rec["memory"].contains("sample_bytes"));
}

}  // namespace
}  // namespace dpa::harness
