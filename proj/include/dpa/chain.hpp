// SPDX-License-Identifier: Apache-2.0
//
// Checkpointed backpropagation through a chain of stochastic steps.
//
// forward_record() runs the chain without keeping any graph and stores every
// intermediate sample together with the RNG state each step started from.
// segmentwise_backward() then walks the chain in reverse, rebuilding one
// step's graph at a time from the stored input and RNG state.

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpa/ad.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa::ckpt {

using StepFn = std::function<ad::Var(ad::Tape&, ad::Var, rng::Stream&)>;

struct StepSpec {
  std::string label;
  StepFn fn;
  rng::StreamState rng_state;
};

class StepError : public std::runtime_error {
 public:
  StepError(std::size_t index, const std::string& label, const std::string& what);
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

struct ChainRecord {
  std::vector<StepSpec> steps;
  // samples[i] is the input of step i; samples.back() is the chain output.
  std::vector<Tensor> samples;
  // Stream state each step consumed, captured before the step ran.
  std::vector<rng::StreamState> rng_states;

  /// Zero-step chain holding only its input.
  static ChainRecord identity(const Tensor& x0);

  std::size_t size() const { return steps.size(); }
  const Tensor& output() const { return samples.back(); }
  std::size_t sample_bytes() const;

  /// Re-run step i from its stored input on a value-only tape.
  Tensor replay_step(std::size_t i) const;
};

/// Gradients added directly at sample i (0..size()) of the chain.
using Injections = std::map<std::size_t, Tensor>;

ChainRecord forward_record(std::vector<StepSpec> steps, const Tensor& x0);

/// d(L)/d(samples[0]) where seed_grad is dL/d(output) and `inject` holds the
/// direct contributions dL/d(samples[i]). Graphs are built `segment` steps at
/// a time and released before the next segment.
Tensor segmentwise_backward(const ChainRecord& record, const Tensor& seed_grad,
                            const Injections& inject = {},
                            ad::MemoryMeter* meter = nullptr,
                            std::size_t segment = 1);

/// Same contract as segmentwise_backward with the whole chain on one tape.
Tensor fullgraph_backward(const ChainRecord& record, const Tensor& seed_grad,
                          const Injections& inject = {},
                          ad::MemoryMeter* meter = nullptr);

std::size_t peak_live_bytes(const ad::MemoryMeter& meter);

}  // namespace dpa::ckpt
