// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dpa/harness.hpp"

namespace dpa::harness {

DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "moons") return DatasetKind::kMoons;
  if (s == "blobs") return DatasetKind::kBlobs;
  if (s == "rings") return DatasetKind::kRings;
  throw ConfigError("unknown dataset kind '" + s + "' (moons, blobs, rings)");
}

const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::kMoons: return "moons";
    case DatasetKind::kBlobs: return "blobs";
    case DatasetKind::kRings: return "rings";
  }
  return "?";
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
  if (n_points < 2 * num_classes) {
    throw ConfigError("dataset: n_points must be >= 2 * num_classes");
  }
  if (data_dim < 2) throw ConfigError("dataset: data_dim must be >= 2");
  if (!(noise >= 0)) throw ConfigError("dataset: noise must be >= 0");
  if (!(code_scale >= 0) || !(code_noise >= 0)) {
    throw ConfigError("dataset: code_scale and code_noise must be >= 0");
  }
  if (kind == DatasetKind::kMoons && num_classes != 2) {
    throw ConfigError("dataset: moons has exactly 2 classes");
  }
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  Dataset d;
  d.num_classes = num_classes;
  d.y.assign(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n));
  const std::size_t w = x.dim(1);
  auto v = x.data();
  d.x = Tensor({n, w}, std::vector<double>(v.begin(), v.begin() + n * w));
  return d;
}

namespace {

// Point on the class manifold in [0, 1]^2, before noise.
std::pair<double, double> base_point(DatasetKind kind, int label, std::size_t k,
                                     rng::Stream& st) {
  constexpr double pi = std::numbers::pi;
  switch (kind) {
    case DatasetKind::kMoons: {
      double th = pi * st.uniform();
      double u = label == 0 ? std::cos(th) : 1.0 - std::cos(th);
      double v = label == 0 ? std::sin(th) : 0.5 - std::sin(th);
      // [-1, 2] x [-0.5, 1] onto [0.1, 0.9]^2
      return {0.1 + 0.8 * (u + 1.0) / 3.0, 0.1 + 0.8 * (v + 0.5) / 1.5};
    }
    case DatasetKind::kBlobs: {
      double th = 2 * pi * label / static_cast<double>(k);
      return {0.5 + 0.3 * std::cos(th), 0.5 + 0.3 * std::sin(th)};
    }
    case DatasetKind::kRings: {
      double r = 0.1 + 0.3 * label / static_cast<double>(k - 1);
      double th = 2 * pi * st.uniform();
      return {0.5 + r * std::cos(th), 0.5 + r * std::sin(th)};
    }
  }
  return {0.5, 0.5};
}

}  // namespace

Dataset gen_dataset(const DatasetSpec& spec) {
  spec.validate();
  rng::Stream st(spec.seed, std::string("dataset/") + dataset_kind_name(spec.kind));
  const std::size_t n = spec.n_points, d = spec.data_dim;
  Dataset out;
  out.num_classes = spec.num_classes;
  // The code does not depend on the seed so train and test splits agree.
  rng::Stream code_stream(0, "dataset/code");
  std::vector<double> code(spec.num_classes * d, 0.0);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    for (std::size_t j = 2; j < d; ++j) code[k * d + j] = code_stream.rademacher();
  }
  std::vector<double> xs(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    int label = static_cast<int>(i % spec.num_classes);
    out.y.push_back(label);
    auto [u, v] = base_point(spec.kind, label, spec.num_classes, st);
    for (std::size_t j = 0; j < d; ++j) {
      double c = 0;
      if (j < 2) {
        c = (j == 0 ? u : v) + spec.noise * st.normal();
      } else {
        c = 0.5 + spec.code_scale * code[static_cast<std::size_t>(label) * d + j] +
            spec.code_noise * st.normal();
      }
      xs[i * d + j] = std::clamp(c, 0.0, 1.0);
    }
  }
  out.x = Tensor({n, d}, std::move(xs));
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

void check_train(const Dataset& data, const TrainConfig& cfg, const char* what) {
  if (data.size() == 0) throw ConfigError(std::string(what) + ": empty dataset");
  if (cfg.steps < 0) throw ConfigError(std::string(what) + ": steps must be >= 0");
  if (cfg.batch == 0) throw ConfigError(std::string(what) + ": batch must be >= 1");
  if (!(cfg.lr > 0)) throw ConfigError(std::string(what) + ": lr must be > 0");
  if (cfg.log_every < 1) throw ConfigError(std::string(what) + ": log_every < 1");
}

struct Batch {
  Tensor x;
  std::vector<int> y;
};

Batch sample_batch(const Dataset& data, std::size_t rows, rng::Stream& st) {
  const std::size_t w = data.x.dim(1);
  auto v = data.x.data();
  Batch b;
  std::vector<double> xs;
  xs.reserve(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    auto i = static_cast<std::size_t>(
        st.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    xs.insert(xs.end(), v.begin() + i * w, v.begin() + (i + 1) * w);
    b.y.push_back(data.y[i]);
  }
  b.x = Tensor({rows, w}, std::move(xs));
  return b;
}

// Loss bookkeeping shared by both trainers.
class LossLog {
 public:
  LossLog(const TrainConfig& cfg, TrainMeta& meta) : cfg_(cfg), meta_(meta) {
    meta_.seed = cfg.seed;
    meta_.steps = cfg.steps;
  }

  void record(int step, double loss, const char* what) {
    if (!std::isfinite(loss)) {
      throw std::runtime_error(std::string(what) + ": loss diverged at step " +
                               std::to_string(step));
    }
    if (step == 0) meta_.initial_loss = loss;
    window_ += loss;
    ++count_;
    if (count_ == cfg_.log_every || step + 1 == cfg_.steps) {
      double mean = window_ / count_;
      meta_.loss_curve.push_back(mean);
      meta_.final_loss = mean;
      window_ = 0;
      count_ = 0;
    }
  }

 private:
  const TrainConfig& cfg_;
  TrainMeta& meta_;
  double window_ = 0;
  int count_ = 0;
};

}  // namespace

DiffusionCheckpoint train_diffusion(const Dataset& data,
                                    const diffusion::NoiseSchedule& schedule,
                                    const TrainConfig& cfg) {
  check_train(data, cfg, "train_diffusion");
  const std::size_t dim = data.x.dim(1);
  rng::Stream init(cfg.seed, "train/diffusion/init");
  DiffusionCheckpoint ck;
  ck.schedule = schedule;
  ck.params = models::init_mlp(dim, cfg.hidden, cfg.time_embed_dim, init);
  auto ps = ck.params.tensors();
  auto opt = models::adam_init(ps, cfg.lr);
  rng::Stream st(cfg.seed, "train/diffusion/batches");
  LossLog log(cfg, ck.meta);
  for (int step = 0; step < cfg.steps; ++step) {
    Batch b = sample_batch(data, cfg.batch, st);
    auto draws = diffusion::draw_loss_inputs(cfg.batch, dim, 1, schedule, st);
    ad::Tape tape;
    auto bound = models::bind(tape, ck.params, true);
    diffusion::EpsFn eps = [&](ad::Tape&, ad::Var x, std::span<const double> ts) {
      return models::eps_theta(ck.params, bound, x, ts);
    };
    ad::Var loss = diffusion::ddpm_loss_on(tape, eps, b.x, draws, schedule,
                                           diffusion::EpsWeighting::kUnit);
    log.record(step, loss.value().item(), "train_diffusion");
    auto g = ad::backward(tape, loss, Tensor::scalar(1.0));
    auto ids = bound.ids();
    models::adam_step(ps, g, ids, opt);
  }
  return ck;
}

ClassifierCheckpoint train_classifier(const Dataset& data, const TrainConfig& cfg) {
  check_train(data, cfg, "train_classifier");
  if (data.num_classes < 2) throw ConfigError("train_classifier: need >= 2 classes");
  const std::size_t dim = data.x.dim(1);
  rng::Stream init(cfg.seed, "train/classifier/init");
  ClassifierCheckpoint ck;
  ck.params = models::init_classifier(dim, cfg.hidden, data.num_classes, init);
  auto ps = ck.params.tensors();
  auto opt = models::adam_init(ps, cfg.lr);
  rng::Stream st(cfg.seed, "train/classifier/batches");
  LossLog log(cfg, ck.meta);
  for (int step = 0; step < cfg.steps; ++step) {
    Batch b = sample_batch(data, cfg.batch, st);
    ad::Tape tape;
    auto bound = models::bind(tape, ck.params, true);
    ad::Var x = tape.constant(b.x);
    ad::Var loss =
        ad::mean(models::cross_entropy(models::classify(ck.params, bound, x), b.y));
    log.record(step, loss.value().item(), "train_classifier");
    auto g = ad::backward(tape, loss, Tensor::scalar(1.0));
    auto ids = bound.ids();
    models::adam_step(ps, g, ids, opt);
  }
  return ck;
}

double accuracy(const models::ClassifierParams& clf, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  if (data.x.dim(1) != clf.data_dim()) {
    throw ShapeError("accuracy: dataset dim " + std::to_string(data.x.dim(1)) +
                     " != classifier dim " + std::to_string(clf.data_dim()));
  }
  auto pred = models::predict(clf, data.x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += pred[i] == data.y[i];
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

}  // namespace dpa::harness
