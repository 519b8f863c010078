// SPDX-License-Identifier: Apache-2.0
//
// Toy datasets, training, checkpoints, experiment drivers and the CLI.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpa/attack.hpp"
#include "dpa/diffusion.hpp"
#include "dpa/models.hpp"
#include "dpa/tensor.hpp"

namespace dpa::harness {

using Json = nlohmann::json;  // std::map-backed, so keys dump sorted

/// Bad configuration or arguments (CLI exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetKind { kMoons, kBlobs, kRings };

DatasetKind parse_dataset_kind(const std::string& s);
const char* dataset_kind_name(DatasetKind k);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kBlobs;
  std::size_t n_points = 512;
  double noise = 0.05;
  std::uint64_t seed = 0;
  std::size_t data_dim = 2;
  std::size_t num_classes = 2;
  // Coordinates past the first two hold 0.5 + code_scale * code[label][j]
  // + code_noise * N(0, 1), with a fixed +-1 code shared by every seed. These
  // are small, predictive features a purifier can wash out.
  double code_scale = 0.0;
  double code_noise = 0.0;

  void validate() const;
};

struct Dataset {
  Tensor x;            // [n, data_dim], inside [0, 1]^data_dim
  std::vector<int> y;  // labels in [0, num_classes)
  std::size_t num_classes = 0;

  std::size_t size() const { return y.size(); }
  Dataset head(std::size_t n) const;
};

/// Deterministic per spec; labels alternate so classes are balanced within 1.
Dataset gen_dataset(const DatasetSpec& spec);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::vector<std::size_t> hidden{64, 64};
  std::size_t time_embed_dim = 16;  // diffusion model only
  int steps = 2000;
  std::size_t batch = 128;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  int log_every = 100;  // loss-curve sampling period
};

struct TrainMeta {
  std::uint64_t seed = 0;
  int steps = 0;
  double initial_loss = 0;  // loss of the first batch, before any update
  double final_loss = 0;    // mean over the last logging window
  std::vector<double> loss_curve;  // every log_every steps
};

struct DiffusionCheckpoint {
  models::MlpParams params;
  diffusion::NoiseSchedule schedule;
  TrainMeta meta;
};

struct ClassifierCheckpoint {
  models::ClassifierParams params;
  TrainMeta meta;
};

/// Adam on the unit-weight noise-prediction loss with t uniform in [1, T].
/// Throws std::runtime_error naming the step if the loss stops being finite.
DiffusionCheckpoint train_diffusion(const Dataset& data,
                                    const diffusion::NoiseSchedule& schedule,
                                    const TrainConfig& cfg);

ClassifierCheckpoint train_classifier(const Dataset& data, const TrainConfig& cfg);

double accuracy(const models::ClassifierParams& clf, const Dataset& data);

// ---------------------------------------------------------------------------
// Persistence

inline constexpr int kFormatVersion = 1;

Json to_json(const DiffusionCheckpoint& c);
Json to_json(const ClassifierCheckpoint& c);
DiffusionCheckpoint diffusion_from_json(const Json& j);
ClassifierCheckpoint classifier_from_json(const Json& j);

void save_checkpoint(const DiffusionCheckpoint& c, const std::filesystem::path& p);
void save_checkpoint(const ClassifierCheckpoint& c, const std::filesystem::path& p);
DiffusionCheckpoint load_diffusion_checkpoint(const std::filesystem::path& p);
ClassifierCheckpoint load_classifier_checkpoint(const std::filesystem::path& p);

/// Parses a JSON document; syntax errors become ConfigError with the byte
/// offset.
Json parse_json(const std::string& text, const std::string& origin);
Json read_json_file(const std::filesystem::path& p);

/// Canonical text: sorted keys, two-space indent, shortest round-trip
/// numbers, trailing newline.
std::string canonical_dump(const Json& j);
void write_text_file(const std::filesystem::path& p, const std::string& text);

/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string content_hash(const Json& j);

// ---------------------------------------------------------------------------
// Benchmark configuration

/// Desk-scale settings: a longer diffusion fit and a shorter attack loop.
inline TrainConfig default_diffusion_train() {
  TrainConfig t;
  t.steps = 6000;
  return t;
}

inline attack::AttackConfig default_bench_attack() {
  attack::AttackConfig a;
  a.eps = 0.1;
  a.n_iter = 20;
  return a;
}

struct BenchConfig {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  DatasetKind dataset = DatasetKind::kBlobs;
  std::size_t n_train = 512;
  std::size_t n_test = 256;
  double noise = 0.08;
  std::size_t num_classes = 2;
  // Two blob coordinates plus 62 weak code coordinates.
  std::size_t data_dim = 64;
  double code_scale = 0.01;
  double code_noise = 0.003;

  std::size_t schedule_T = 50;
  double beta_min = 1e-4;
  double beta_max = 2e-2;

  TrainConfig diffusion_train = default_diffusion_train();
  TrainConfig classifier_train;

  diffusion::PurifierKind purifier = diffusion::PurifierKind::kVpsde;
  std::size_t t_star = 10;

  attack::AttackConfig attack = default_bench_attack();
  std::vector<std::string> attacks{"diffattack", "adaptive", "bpda", "spsa"};
  std::size_t n_eval = 128;
  int n_eval_draws = 5;

  std::vector<std::size_t> sweep_t_star{5, 10, 20, 30, 50};
  std::vector<double> sweep_lambda{0.1, 1.0, 10.0};
  std::vector<std::string> sweep_timesteps{"uniform", "initial_third",
                                           "final_third"};
  std::vector<std::size_t> mem_t_values{16, 64, 256, 512};
  double fullgraph_budget_bytes = 2e9;

  void validate() const;
  /// Train split uses seed 2s, test split 2s + 1 (at least 2 * num_classes
  /// points are generated; callers take the head).
  DatasetSpec dataset_spec(std::uint64_t seed, bool train) const;
  diffusion::NoiseSchedule schedule() const;
  diffusion::PurifierConfig purifier_config(std::size_t t_star) const;
};

/// Missing keys keep their defaults; unknown keys raise ConfigError.
BenchConfig bench_from_json(const Json& j);
Json to_json(const BenchConfig& c);

/// Applies "a.b=value" (value parsed as JSON, else taken as a string).
void apply_override(Json& j, const std::string& assignment);

// ---------------------------------------------------------------------------
// Experiments

struct SeedModels {
  std::uint64_t seed = 0;
  Dataset train;
  Dataset test;
  DiffusionCheckpoint diffusion;
  ClassifierCheckpoint classifier;
};

/// Data and both models for one seed.
SeedModels prepare_seed(const BenchConfig& cfg, std::uint64_t seed);

struct AttackOutcome {
  std::string attack;
  double robust_accuracy = 0;
  double mean_best_loss = 0;
  std::vector<bool> correct;  // per evaluation point
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::size_t t_star = 0;
  double clean_accuracy = 0;
  std::vector<bool> clean_correct;
  std::vector<AttackOutcome> attacks;
};

/// Clean majority-vote accuracy and every named attack at one T*.
SeedRun run_seed(const BenchConfig& cfg, const SeedModels& m, std::size_t t_star,
                 const attack::AttackConfig& acfg,
                 const std::vector<std::string>& attacks);

Json to_json(const SeedRun& r);

struct MemPoint {
  std::size_t t = 0;
  std::size_t graph_peak_bytes = 0;
  std::size_t sample_bytes = 0;
  std::optional<std::size_t> fullgraph_peak_bytes;  // unset when over budget
};

/// Peak live graph bytes for one backward pass through a purifier of length t
/// (random network, batch of `rows`).
MemPoint measure_memory(std::size_t t, std::size_t rows, double fullgraph_budget,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// CLI

/// Exit code 0 on success, 1 on configuration errors, 2 on runtime failures.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace dpa::harness
