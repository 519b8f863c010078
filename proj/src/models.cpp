// SPDX-License-Identifier: Apache-2.0

#include "dpa/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dpa::models {

namespace {

template <typename P>
std::vector<Tensor*> collect(P& p) {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    out.push_back(&p.weights[i]);
    out.push_back(&p.biases[i]);
  }
  return out;
}

template <typename P>
std::vector<const Tensor*> collect_const(const P& p) {
  std::vector<const Tensor*> out;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    out.push_back(&p.weights[i]);
    out.push_back(&p.biases[i]);
  }
  return out;
}

std::vector<std::size_t> chain_dims(std::size_t in,
                                    const std::vector<std::size_t>& hidden,
                                    std::size_t out) {
  std::vector<std::size_t> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

void glorot(const std::vector<std::size_t>& dims, rng::Stream* stream,
            std::vector<Tensor>& weights, std::vector<Tensor>& biases) {
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    std::size_t fi = dims[l], fo = dims[l + 1];
    if (stream) {
      double a = std::sqrt(6.0 / static_cast<double>(fi + fo));
      weights.push_back(stream->uniform_tensor({fi, fo}, -a, a));
    } else {
      weights.push_back(Tensor::zeros({fi, fo}));
    }
    biases.push_back(Tensor::zeros({fo}));
  }
}

void check_layers(const std::vector<std::size_t>& dims,
                  const std::vector<Tensor>& weights,
                  const std::vector<Tensor>& biases, const char* what) {
  if (dims.size() < 2 || weights.size() + 1 != dims.size() ||
      biases.size() != weights.size()) {
    throw std::invalid_argument(std::string(what) +
                                ": layer count does not match layer_dims");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].shape() != Shape{dims[l], dims[l + 1]} ||
        biases[l].shape() != Shape{dims[l + 1]}) {
      throw ShapeError(std::string(what) + ": layer " + std::to_string(l) +
                       " has weight " + shape_str(weights[l].shape()) +
                       " and bias " + shape_str(biases[l].shape()) +
                       ", expected [" + std::to_string(dims[l]) + "," +
                       std::to_string(dims[l + 1]) + "]");
    }
  }
}

ad::Var mlp_body(const Bound& b, ad::Var h) {
  const std::size_t n = b.weights.size();
  for (std::size_t l = 0; l < n; ++l) {
    h = ad::add_bias(ad::matmul(h, b.weights[l]), b.biases[l]);
    if (l + 1 < n) h = ad::tanh(h);
  }
  return h;
}

template <typename P>
Bound bind_impl(ad::Tape& tape, const P& p, bool trainable) {
  Bound b;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    b.weights.push_back(trainable ? tape.variable(p.weights[l])
                                  : tape.constant(p.weights[l]));
    b.biases.push_back(trainable ? tape.variable(p.biases[l])
                                 : tape.constant(p.biases[l]));
  }
  return b;
}

}  // namespace

std::vector<Tensor*> MlpParams::tensors() { return collect(*this); }
std::vector<const Tensor*> MlpParams::tensors() const {
  return collect_const(*this);
}
std::vector<Tensor*> ClassifierParams::tensors() { return collect(*this); }
std::vector<const Tensor*> ClassifierParams::tensors() const {
  return collect_const(*this);
}

Tensor time_embed(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) {
    throw std::invalid_argument("time_embed: dim must be even and positive, got " +
                                std::to_string(dim));
  }
  std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                        static_cast<double>(dim));
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return Tensor::vector(std::move(out));
}

Tensor time_embed_rows(std::span<const double> ts, std::size_t dim) {
  std::vector<double> out;
  out.reserve(ts.size() * dim);
  for (double t : ts) {
    auto row = time_embed(t, dim);
    out.insert(out.end(), row.data().begin(), row.data().end());
  }
  return Tensor({ts.size(), dim}, std::move(out));
}

MlpParams init_mlp(std::size_t data_dim, const std::vector<std::size_t>& hidden,
                   std::size_t time_embed_dim, rng::Stream& stream) {
  time_embed(0.0, time_embed_dim);  // validates dim
  MlpParams p;
  p.data_dim = data_dim;
  p.time_embed_dim = time_embed_dim;
  p.layer_dims = chain_dims(data_dim + time_embed_dim, hidden, data_dim);
  glorot(p.layer_dims, &stream, p.weights, p.biases);
  return p;
}

MlpParams zero_mlp(std::size_t data_dim, const std::vector<std::size_t>& hidden,
                   std::size_t time_embed_dim) {
  time_embed(0.0, time_embed_dim);
  MlpParams p;
  p.data_dim = data_dim;
  p.time_embed_dim = time_embed_dim;
  p.layer_dims = chain_dims(data_dim + time_embed_dim, hidden, data_dim);
  glorot(p.layer_dims, nullptr, p.weights, p.biases);
  return p;
}

ClassifierParams init_classifier(std::size_t data_dim,
                                 const std::vector<std::size_t>& hidden,
                                 std::size_t num_classes, rng::Stream& stream) {
  if (num_classes < 2) throw std::invalid_argument("classifier: need K >= 2");
  ClassifierParams p;
  p.num_classes = num_classes;
  p.layer_dims = chain_dims(data_dim, hidden, num_classes);
  glorot(p.layer_dims, &stream, p.weights, p.biases);
  return p;
}

ClassifierParams zero_classifier(std::size_t data_dim,
                                 const std::vector<std::size_t>& hidden,
                                 std::size_t num_classes) {
  if (num_classes < 2) throw std::invalid_argument("classifier: need K >= 2");
  ClassifierParams p;
  p.num_classes = num_classes;
  p.layer_dims = chain_dims(data_dim, hidden, num_classes);
  glorot(p.layer_dims, nullptr, p.weights, p.biases);
  return p;
}

void validate(const MlpParams& p) {
  check_layers(p.layer_dims, p.weights, p.biases, "eps mlp");
  if (p.layer_dims.front() != p.data_dim + p.time_embed_dim ||
      p.layer_dims.back() != p.data_dim) {
    throw ShapeError("eps mlp: layer_dims must start at data_dim + "
                     "time_embed_dim and end at data_dim");
  }
}

void validate(const ClassifierParams& p) {
  check_layers(p.layer_dims, p.weights, p.biases, "classifier");
  if (p.layer_dims.back() != p.num_classes || p.num_classes < 2) {
    throw ShapeError("classifier: output width must equal num_classes >= 2");
  }
}

std::vector<ad::NodeId> Bound::ids() const {
  std::vector<ad::NodeId> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(weights[i].id);
    out.push_back(biases[i].id);
  }
  return out;
}

Bound bind(ad::Tape& tape, const MlpParams& p, bool trainable) {
  return bind_impl(tape, p, trainable);
}

Bound bind(ad::Tape& tape, const ClassifierParams& p, bool trainable) {
  return bind_impl(tape, p, trainable);
}

ad::Var eps_theta(const MlpParams& p, const Bound& bound, ad::Var x,
                  std::span<const double> t_rows) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) != p.data_dim) {
    throw ShapeError("eps_theta: input shape " + shape_str(xv.shape()) +
                     " does not match data_dim " + std::to_string(p.data_dim));
  }
  if (t_rows.size() != xv.dim(0)) {
    throw ShapeError("eps_theta: " + std::to_string(t_rows.size()) +
                     " times for " + std::to_string(xv.dim(0)) + " rows");
  }
  ad::Var emb = x.tape->constant(time_embed_rows(t_rows, p.time_embed_dim));
  return mlp_body(bound, ad::concat(x, emb));
}

ad::Var eps_theta(ad::Tape& tape, const MlpParams& p, ad::Var x, double t) {
  std::vector<double> ts(x.value().rows(), t);
  return eps_theta(p, bind(tape, p, false), x, ts);
}

Tensor eps_theta(const MlpParams& p, const Tensor& x, double t) {
  ad::Tape tape(nullptr, false);
  return eps_theta(tape, p, tape.constant(x), t).value();
}

ad::Var classify(const ClassifierParams& p, const Bound& bound, ad::Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) != p.data_dim()) {
    throw ShapeError("classify: input shape " + shape_str(xv.shape()) +
                     " does not match data_dim " +
                     std::to_string(p.data_dim()));
  }
  return mlp_body(bound, x);
}

ad::Var classify(ad::Tape& tape, const ClassifierParams& p, ad::Var x) {
  return classify(p, bind(tape, p, false), x);
}

Tensor classify(const ClassifierParams& p, const Tensor& x) {
  ad::Tape tape(nullptr, false);
  return classify(tape, p, tape.constant(x)).value();
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::size_t rows = logits.rows(), k = logits.cols();
  std::vector<int> out(rows);
  auto v = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

std::vector<int> predict(const ClassifierParams& p, const Tensor& x) {
  return argmax_rows(classify(p, x));
}

double cross_entropy(const Tensor& logits, int y) {
  ad::Tape tape(nullptr, false);
  return ad::softmax_xent(tape.constant(logits.reshaped({logits.size()})), {y})
      .value()
      .item();
}

ad::Var cross_entropy(ad::Var logits, const std::vector<int>& labels) {
  return ad::softmax_xent(logits, labels);
}

OptimState adam_init(std::span<Tensor* const> params, double lr, double beta1,
                     double beta2, double eps) {
  OptimState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  for (const Tensor* p : params) {
    s.m.push_back(Tensor::zeros(p->shape()));
    s.v.push_back(Tensor::zeros(p->shape()));
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, const ad::GradMap& grads,
               std::span<const ad::NodeId> ids, OptimState& state) {
  if (ids.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: params, ids and state disagree");
  }
  std::vector<const Tensor*> gs;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = grads.find(ids[i]);
    if (it == grads.end()) {
      throw std::invalid_argument("adam_step: missing gradient for parameter " +
                                  std::to_string(i));
    }
    require_same_shape(*params[i], it->second, "adam_step");
    gs.push_back(&it->second);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = gs[i]->data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    auto w = params[i]->mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      double mh = m[j] / c1;
      double vh = v[j] / c2;
      w[j] -= state.lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

}  // namespace dpa::models
