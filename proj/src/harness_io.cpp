// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dpa/harness.hpp"

namespace dpa::harness {

// ---------------------------------------------------------------------------
// Generic JSON helpers

Json parse_json(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(origin + ": parse error at byte " + std::to_string(e.byte) +
                      ": " + e.what());
  }
}

Json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json(ss.str(), p.string());
}

std::string canonical_dump(const Json& j) { return j.dump(2) + "\n"; }

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  out.close();
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

std::string content_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Json tensors_json(const std::vector<Tensor>& ts) {
  Json arr = Json::array();
  for (const auto& t : ts) {
    auto d = t.data();
    arr.push_back(std::vector<double>(d.begin(), d.end()));
  }
  return arr;
}

// Restores tensors in place; shapes come from the freshly built model.
void load_tensors(const Json& arr, std::vector<Tensor>& ts, const char* what) {
  if (!arr.is_array() || arr.size() != ts.size()) {
    throw ConfigError(std::string("checkpoint: wrong number of ") + what);
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    auto v = arr[i].get<std::vector<double>>();
    if (v.size() != ts[i].size()) {
      throw ConfigError(std::string("checkpoint: ") + what + "[" +
                        std::to_string(i) + "] has " + std::to_string(v.size()) +
                        " values, expected " + std::to_string(ts[i].size()));
    }
    ts[i] = Tensor(ts[i].shape(), std::move(v));
  }
}

Json meta_json(const TrainMeta& m) {
  return Json{{"seed", m.seed},
              {"steps", m.steps},
              {"initial_loss", m.initial_loss},
              {"final_loss", m.final_loss},
              {"loss_curve", m.loss_curve}};
}

TrainMeta meta_from_json(const Json& j) {
  TrainMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.steps = j.at("steps").get<int>();
  m.initial_loss = j.at("initial_loss").get<double>();
  m.final_loss = j.at("final_loss").get<double>();
  m.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  return m;
}

void check_header(const Json& j, const char* model) {
  if (!j.is_object() || !j.contains("format_version")) {
    throw ConfigError("checkpoint: missing format_version");
  }
  int v = j.at("format_version").get<int>();
  if (v != kFormatVersion) {
    throw ConfigError("checkpoint: format_version " + std::to_string(v) +
                      " is not supported (this build reads version " +
                      std::to_string(kFormatVersion) + ")");
  }
  std::string kind = j.at("model").get<std::string>();
  if (kind != model) {
    throw ConfigError("checkpoint: expected a " + std::string(model) +
                      " model, found " + kind);
  }
}

std::vector<std::size_t> hidden_of(const std::vector<std::size_t>& dims) {
  return {dims.begin() + 1, dims.end() - 1};
}

template <typename F>
auto wrap_json_errors(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace

Json to_json(const DiffusionCheckpoint& c) {
  return Json{{"format_version", kFormatVersion},
              {"model", "diffusion"},
              {"layer_dims", c.params.layer_dims},
              {"data_dim", c.params.data_dim},
              {"time_embed_dim", c.params.time_embed_dim},
              {"schedule", Json{{"betas", c.schedule.betas()}}},
              {"weights", tensors_json(c.params.weights)},
              {"biases", tensors_json(c.params.biases)},
              {"meta", meta_json(c.meta)}};
}

Json to_json(const ClassifierCheckpoint& c) {
  return Json{{"format_version", kFormatVersion},
              {"model", "classifier"},
              {"layer_dims", c.params.layer_dims},
              {"num_classes", c.params.num_classes},
              {"weights", tensors_json(c.params.weights)},
              {"biases", tensors_json(c.params.biases)},
              {"meta", meta_json(c.meta)}};
}

DiffusionCheckpoint diffusion_from_json(const Json& j) {
  return wrap_json_errors([&] {
    check_header(j, "diffusion");
    DiffusionCheckpoint c;
    auto dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    auto data_dim = j.at("data_dim").get<std::size_t>();
    auto ted = j.at("time_embed_dim").get<std::size_t>();
    if (dims.size() < 2 || dims.front() != data_dim + ted || dims.back() != data_dim) {
      throw ConfigError("checkpoint: inconsistent diffusion layer_dims");
    }
    c.params = models::zero_mlp(data_dim, hidden_of(dims), ted);
    load_tensors(j.at("weights"), c.params.weights, "weights");
    load_tensors(j.at("biases"), c.params.biases, "biases");
    c.schedule = diffusion::NoiseSchedule(
        j.at("schedule").at("betas").get<std::vector<double>>());
    c.meta = meta_from_json(j.at("meta"));
    return c;
  });
}

ClassifierCheckpoint classifier_from_json(const Json& j) {
  return wrap_json_errors([&] {
    check_header(j, "classifier");
    ClassifierCheckpoint c;
    auto dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    auto k = j.at("num_classes").get<std::size_t>();
    if (dims.size() < 2 || dims.back() != k) {
      throw ConfigError("checkpoint: inconsistent classifier layer_dims");
    }
    c.params = models::zero_classifier(dims.front(), hidden_of(dims), k);
    load_tensors(j.at("weights"), c.params.weights, "weights");
    load_tensors(j.at("biases"), c.params.biases, "biases");
    c.meta = meta_from_json(j.at("meta"));
    return c;
  });
}

void save_checkpoint(const DiffusionCheckpoint& c, const std::filesystem::path& p) {
  write_text_file(p, canonical_dump(to_json(c)));
}

void save_checkpoint(const ClassifierCheckpoint& c, const std::filesystem::path& p) {
  write_text_file(p, canonical_dump(to_json(c)));
}

DiffusionCheckpoint load_diffusion_checkpoint(const std::filesystem::path& p) {
  return diffusion_from_json(read_json_file(p));
}

ClassifierCheckpoint load_classifier_checkpoint(const std::filesystem::path& p) {
  return classifier_from_json(read_json_file(p));
}

// ---------------------------------------------------------------------------
// Benchmark configuration

namespace {

// Reads known keys of one object and rejects the rest.
class Section {
 public:
  Section(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("unknown config key '" + path(it.key().c_str()) + "'");
      }
    }
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_train(Section& parent, const char* key, TrainConfig& t,
                bool diffusion_model) {
  if (!parent.has(key)) return;
  Section s(parent.at(key), parent.path(key));
  s.get("hidden", t.hidden);
  if (diffusion_model) s.get("time_embed_dim", t.time_embed_dim);
  s.get("steps", t.steps);
  s.get("batch", t.batch);
  s.get("lr", t.lr);
  s.get("log_every", t.log_every);
  s.finish();
}

Json train_json(const TrainConfig& t, bool diffusion_model) {
  Json j{{"hidden", t.hidden},   {"steps", t.steps},
         {"batch", t.batch},     {"lr", t.lr},
         {"log_every", t.log_every}};
  if (diffusion_model) j["time_embed_dim"] = t.time_embed_dim;
  return j;
}

template <typename E, typename P>
void get_enum(Section& s, const char* key, E& out, P parse) {
  std::string v;
  if (!s.has(key)) return;
  s.get(key, v);
  try {
    out = parse(v);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(s.path(key) + ": " + e.what());
  }
}

}  // namespace

void BenchConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds: need at least one seed");
  if (n_train < 2 * num_classes || n_test < 1) {
    throw ConfigError("dataset: n_train >= 2 * num_classes and n_test >= 1");
  }
  if (n_eval < 1) throw ConfigError("n_eval must be >= 1");
  if (n_eval_draws < 1) throw ConfigError("n_eval_draws must be >= 1");
  if (schedule_T < 1) throw ConfigError("schedule.T must be >= 1");
  if (!(0 < beta_min && beta_min <= beta_max && beta_max < 1)) {
    throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
  }
  if (t_star > schedule_T) throw ConfigError("purifier.t_star exceeds schedule.T");
  for (auto t : sweep_t_star) {
    if (t > schedule_T) throw ConfigError("sweep.t_star value exceeds schedule.T");
  }
  for (const auto& name : attacks) {
    try {
      attack::attack_by_name(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("attacks: ") + e.what());
    }
  }
  for (const auto& s : sweep_timesteps) {
    try {
      attack::parse_timesteps(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sweep.timesteps: ") + e.what());
    }
  }
  for (auto t : mem_t_values) {
    if (t < 1) throw ConfigError("memcheck.t_values must be >= 1");
  }
  try {
    attack.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  dataset_spec(0, true).validate();
}

DatasetSpec BenchConfig::dataset_spec(std::uint64_t seed, bool train) const {
  std::size_t n = train ? n_train : std::max(n_test, 2 * num_classes);
  return {dataset, n,        noise,      2 * seed + (train ? 0 : 1),
          data_dim, num_classes, code_scale, code_noise};
}

diffusion::NoiseSchedule BenchConfig::schedule() const {
  return diffusion::linear_schedule(schedule_T, beta_min, beta_max);
}

diffusion::PurifierConfig BenchConfig::purifier_config(std::size_t ts) const {
  diffusion::PurifierConfig p;
  p.kind = purifier;
  p.t_star = ts;
  p.schedule = schedule();
  return p;
}

BenchConfig bench_from_json(const Json& j) {
  BenchConfig c;
  Section top(j, "");
  int version = kFormatVersion;
  top.get("format_version", version);
  if (version != kFormatVersion) {
    throw ConfigError("config format_version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kFormatVersion) + ")");
  }
  top.get("seed", c.seed);
  top.get("seeds", c.seeds);
  if (top.has("dataset")) {
    Section s(top.at("dataset"), "dataset");
    get_enum(s, "kind", c.dataset, parse_dataset_kind);
    s.get("n_train", c.n_train);
    s.get("n_test", c.n_test);
    s.get("noise", c.noise);
    s.get("num_classes", c.num_classes);
    s.get("data_dim", c.data_dim);
    s.get("code_scale", c.code_scale);
    s.get("code_noise", c.code_noise);
    s.finish();
  }
  if (top.has("schedule")) {
    Section s(top.at("schedule"), "schedule");
    s.get("T", c.schedule_T);
    s.get("beta_min", c.beta_min);
    s.get("beta_max", c.beta_max);
    s.finish();
  }
  read_train(top, "diffusion_model", c.diffusion_train, true);
  read_train(top, "classifier", c.classifier_train, false);
  if (top.has("purifier")) {
    Section s(top.at("purifier"), "purifier");
    get_enum(s, "kind", c.purifier, diffusion::parse_kind);
    s.get("t_star", c.t_star);
    s.finish();
  }
  if (top.has("attack")) {
    Section s(top.at("attack"), "attack");
    auto& a = c.attack;
    s.get("eps", a.eps);
    get_enum(s, "norm", a.norm, attack::parse_norm);
    s.get("n_iter", a.n_iter);
    s.get("eot", a.eot);
    s.get("alpha", a.alpha);
    s.get("lambda", a.lambda);
    s.get("step_size", a.step_size);
    if (s.has("checkpoints") && !s.at("checkpoints").is_null()) {
      std::vector<int> w;
      s.get("checkpoints", w);
      a.checkpoints = w;
    }
    get_enum(s, "timesteps", a.timesteps, attack::parse_timesteps);
    s.get("random_start", a.random_start);
    s.get("pgd_step", a.pgd_step);
    s.get("spsa_samples", a.spsa_samples);
    s.get("spsa_delta", a.spsa_delta);
    s.get("joint_weight", a.joint_weight);
    s.finish();
  }
  top.get("attacks", c.attacks);
  top.get("n_eval", c.n_eval);
  top.get("n_eval_draws", c.n_eval_draws);
  if (top.has("sweep")) {
    Section s(top.at("sweep"), "sweep");
    s.get("t_star", c.sweep_t_star);
    s.get("lambda", c.sweep_lambda);
    s.get("timesteps", c.sweep_timesteps);
    s.finish();
  }
  if (top.has("memcheck")) {
    Section s(top.at("memcheck"), "memcheck");
    s.get("t_values", c.mem_t_values);
    s.get("fullgraph_budget_bytes", c.fullgraph_budget_bytes);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

Json to_json(const BenchConfig& c) {
  const auto& a = c.attack;
  Json attack{{"eps", a.eps},
              {"norm", attack::norm_name(a.norm)},
              {"n_iter", a.n_iter},
              {"eot", a.eot},
              {"alpha", a.alpha},
              {"lambda", a.lambda},
              {"step_size", a.step_size},
              {"checkpoints", a.checkpoints ? Json(*a.checkpoints) : Json(nullptr)},
              {"timesteps", attack::timesteps_name(a.timesteps)},
              {"random_start", a.random_start},
              {"pgd_step", a.pgd_step},
              {"spsa_samples", a.spsa_samples},
              {"spsa_delta", a.spsa_delta},
              {"joint_weight", a.joint_weight}};
  return Json{
      {"format_version", kFormatVersion},
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"dataset",
       {{"kind", dataset_kind_name(c.dataset)},
        {"n_train", c.n_train},
        {"n_test", c.n_test},
        {"noise", c.noise},
        {"num_classes", c.num_classes},
        {"data_dim", c.data_dim},
        {"code_scale", c.code_scale},
        {"code_noise", c.code_noise}}},
      {"schedule", {{"T", c.schedule_T}, {"beta_min", c.beta_min}, {"beta_max", c.beta_max}}},
      {"diffusion_model", train_json(c.diffusion_train, true)},
      {"classifier", train_json(c.classifier_train, false)},
      {"purifier", {{"kind", diffusion::kind_name(c.purifier)}, {"t_star", c.t_star}}},
      {"attack", attack},
      {"attacks", c.attacks},
      {"n_eval", c.n_eval},
      {"n_eval_draws", c.n_eval_draws},
      {"sweep",
       {{"t_star", c.sweep_t_star},
        {"lambda", c.sweep_lambda},
        {"timesteps", c.sweep_timesteps}}},
      {"memcheck",
       {{"t_values", c.mem_t_values},
        {"fullgraph_budget_bytes", c.fullgraph_budget_bytes}}}};
}

void apply_override(Json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("--set: empty key in '" + path + "'");
    if (!node->is_object()) throw ConfigError("--set: '" + path + "' is not an object path");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

}  // namespace dpa::harness
