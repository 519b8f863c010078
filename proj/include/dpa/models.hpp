// SPDX-License-Identifier: Apache-2.0
//
// Small MLPs: the time-conditioned noise predictor and the classifier, plus
// an Adam optimizer over their parameters.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dpa/ad.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa::models {

/// Noise predictor eps(x, t). layer_dims = {data_dim + time_embed_dim,
/// hidden..., data_dim}; tanh between hidden layers.
struct MlpParams {
  std::vector<std::size_t> layer_dims;
  std::size_t data_dim = 0;
  std::size_t time_embed_dim = 0;
  std::vector<Tensor> weights;  // [in, out]
  std::vector<Tensor> biases;   // [out]

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

struct ClassifierParams {
  std::vector<std::size_t> layer_dims;  // {data_dim, hidden..., K}
  std::size_t num_classes = 0;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  std::size_t data_dim() const { return layer_dims.front(); }
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

/// Sinusoidal features [sin(t/10000^(2i/dim)), cos(t/10000^(2i/dim))].
Tensor time_embed(double t, std::size_t dim);
/// One embedding row per entry of `ts`: shape [ts.size(), dim].
Tensor time_embed_rows(std::span<const double> ts, std::size_t dim);

MlpParams init_mlp(std::size_t data_dim, const std::vector<std::size_t>& hidden,
                   std::size_t time_embed_dim, rng::Stream& stream);
MlpParams zero_mlp(std::size_t data_dim, const std::vector<std::size_t>& hidden,
                   std::size_t time_embed_dim);
ClassifierParams init_classifier(std::size_t data_dim,
                                 const std::vector<std::size_t>& hidden,
                                 std::size_t num_classes, rng::Stream& stream);
ClassifierParams zero_classifier(std::size_t data_dim,
                                 const std::vector<std::size_t>& hidden,
                                 std::size_t num_classes);

void validate(const MlpParams& p);
void validate(const ClassifierParams& p);

/// Parameters placed on a tape, either as trainable variables or constants.
struct Bound {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;

  std::vector<ad::NodeId> ids() const;
};

Bound bind(ad::Tape& tape, const MlpParams& p, bool trainable);
Bound bind(ad::Tape& tape, const ClassifierParams& p, bool trainable);

/// eps_theta on a tape with one network time per row of x ([B, data_dim]).
ad::Var eps_theta(const MlpParams& p, const Bound& bound, ad::Var x,
                  std::span<const double> t_rows);
ad::Var eps_theta(ad::Tape& tape, const MlpParams& p, ad::Var x, double t);
Tensor eps_theta(const MlpParams& p, const Tensor& x, double t);

ad::Var classify(const ClassifierParams& p, const Bound& bound, ad::Var x);
ad::Var classify(ad::Tape& tape, const ClassifierParams& p, ad::Var x);
Tensor classify(const ClassifierParams& p, const Tensor& x);

/// Argmax per row, lowest index on ties.
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<int> predict(const ClassifierParams& p, const Tensor& x);

/// -log softmax(logits)[y] for a single logit vector.
double cross_entropy(const Tensor& logits, int y);
/// Per-row cross-entropy on a tape.
ad::Var cross_entropy(ad::Var logits, const std::vector<int>& labels);

struct OptimState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimState adam_init(std::span<Tensor* const> params, double lr = 1e-3,
                     double beta1 = 0.9, double beta2 = 0.999,
                     double eps = 1e-8);

/// One Adam step with bias correction. `ids[i]` is the tape node holding
/// params[i]; every id must have an entry in `grads`.
void adam_step(std::span<Tensor* const> params, const ad::GradMap& grads,
               std::span<const ad::NodeId> ids, OptimState& state);

}  // namespace dpa::models
