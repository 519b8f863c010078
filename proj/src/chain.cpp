// SPDX-License-Identifier: Apache-2.0

#include "dpa/chain.hpp"

#include <utility>

namespace dpa::ckpt {

StepError::StepError(std::size_t index, const std::string& label,
                     const std::string& what)
    : std::runtime_error("step " + std::to_string(index) + " (" + label +
                         "): " + what),
      index_(index) {}

ChainRecord ChainRecord::identity(const Tensor& x0) {
  ChainRecord r;
  r.samples.push_back(x0);
  return r;
}

std::size_t ChainRecord::sample_bytes() const {
  std::size_t total = 0;
  for (const auto& s : samples) total += s.bytes();
  return total;
}

namespace {

ad::Var run_step(const StepSpec& step, std::size_t index, ad::Tape& tape,
                 ad::Var x) {
  auto stream = rng::Stream::restore(step.rng_state);
  try {
    ad::Var y = step.fn(tape, x, stream);
    if (y.tape != &tape) throw ad::TapeError("step returned a foreign node");
    if (y.value().shape() != x.value().shape()) {
      throw ShapeError("step changed shape from " + shape_str(x.value().shape()) +
                       " to " + shape_str(y.value().shape()));
    }
    return y;
  } catch (const StepError&) {
    throw;
  } catch (const std::exception& e) {
    throw StepError(index, step.label, e.what());
  }
}

void check_injection(const Injections& inject, const ChainRecord& record) {
  for (const auto& [i, g] : inject) {
    if (i >= record.samples.size()) {
      throw std::out_of_range("injection at sample " + std::to_string(i) +
                              " is past the chain end " +
                              std::to_string(record.samples.size() - 1));
    }
    if (g.shape() != record.samples[i].shape()) {
      throw ShapeError("injection at step " + std::to_string(i) + ": shape " +
                       shape_str(g.shape()) + " does not match sample " +
                       shape_str(record.samples[i].shape()));
    }
  }
}

void check_seed(const ChainRecord& record, const Tensor& seed_grad) {
  if (record.samples.empty()) throw std::invalid_argument("empty chain record");
  if (seed_grad.shape() != record.output().shape()) {
    throw ShapeError("seed gradient shape " + shape_str(seed_grad.shape()) +
                     " does not match chain output " +
                     shape_str(record.output().shape()));
  }
}

}  // namespace

Tensor ChainRecord::replay_step(std::size_t i) const {
  if (i >= steps.size()) throw std::out_of_range("replay_step: no such step");
  ad::Tape tape(nullptr, false);
  return run_step(steps[i], i, tape, tape.constant(samples[i])).value();
}

ChainRecord forward_record(std::vector<StepSpec> steps, const Tensor& x0) {
  if (steps.empty()) throw std::invalid_argument("forward_record: no steps");
  ChainRecord r;
  r.samples.reserve(steps.size() + 1);
  r.samples.push_back(x0);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    ad::Tape tape(nullptr, false);
    ad::Var y = run_step(steps[i], i, tape, tape.constant(r.samples.back()));
    r.samples.push_back(y.value());
    r.rng_states.push_back(steps[i].rng_state);
  }
  r.steps = std::move(steps);
  return r;
}

Tensor segmentwise_backward(const ChainRecord& record, const Tensor& seed_grad,
                            const Injections& inject, ad::MemoryMeter* meter,
                            std::size_t segment) {
  check_seed(record, seed_grad);
  check_injection(inject, record);
  if (segment == 0) throw std::invalid_argument("segment size must be >= 1");

  const std::size_t n = record.size();
  Tensor g = seed_grad;
  if (auto it = inject.find(n); it != inject.end()) g = g + it->second;

  std::size_t end = n;
  while (end > 0) {
    const std::size_t begin = end > segment ? end - segment : 0;
    ad::Tape tape(meter);
    ad::Var leaf = tape.variable(record.samples[begin]);
    std::vector<ad::Var> outs;
    ad::Var x = leaf;
    for (std::size_t i = begin; i < end; ++i) {
      x = run_step(record.steps[i], i, tape, x);
      outs.push_back(x);
    }
    // Seeds in descending sample order, matching the full-graph pass.
    std::vector<std::pair<ad::Var, Tensor>> seeds{{outs.back(), g}};
    for (std::size_t i = end - 1; i > begin; --i) {
      if (auto it = inject.find(i); it != inject.end()) {
        seeds.emplace_back(outs[i - begin - 1], it->second);
      }
    }
    auto grads = ad::backward(tape, seeds);
    auto it = grads.find(leaf.id);
    g = it != grads.end() ? it->second
                          : Tensor::zeros(record.samples[begin].shape());
    tape.release();
    if (auto inj = inject.find(begin); inj != inject.end()) g = g + inj->second;
    end = begin;
  }
  return g;
}

Tensor fullgraph_backward(const ChainRecord& record, const Tensor& seed_grad,
                          const Injections& inject, ad::MemoryMeter* meter) {
  check_seed(record, seed_grad);
  check_injection(inject, record);

  ad::Tape tape(meter);
  std::vector<ad::Var> nodes;
  nodes.push_back(tape.variable(record.samples[0]));
  for (std::size_t i = 0; i < record.size(); ++i) {
    nodes.push_back(run_step(record.steps[i], i, tape, nodes.back()));
  }
  std::vector<std::pair<ad::Var, Tensor>> seeds{{nodes.back(), seed_grad}};
  for (std::size_t i = nodes.size(); i-- > 0;) {
    if (auto it = inject.find(i); it != inject.end()) {
      seeds.emplace_back(nodes[i], it->second);
    }
  }
  auto grads = ad::backward(tape, seeds);
  auto it = grads.find(nodes[0].id);
  Tensor g = it != grads.end() ? it->second
                               : Tensor::zeros(record.samples[0].shape());
  tape.release();
  return g;
}

std::size_t peak_live_bytes(const ad::MemoryMeter& meter) {
  return meter.peak();
}

}  // namespace dpa::ckpt
