// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff over dense tensors with an explicit tape.
//
// Forward values are computed eagerly when an op is recorded. A tape can be
// released at any point, which frees every node it holds; this is what makes
// per-segment graph construction and disposal possible.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dpa/tensor.hpp"

namespace dpa::ad {

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatmul,
  kAddBias,
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSquare,
  kSqrt,
  kSum,
  kMean,
  kConcat,
  kSoftmaxXent,
};

const char* op_name(OpKind op);

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Byte accounting for live tape nodes. Several tapes may report to one
/// meter; it also tracks how many tapes are live at once.
class MemoryMeter {
 public:
  void add(std::size_t bytes);
  void sub(std::size_t bytes);
  void tape_opened();
  void tape_closed();
  // Peak is reset to the current level.
  void reset();

  std::size_t current() const { return current_; }
  std::size_t peak() const { return peak_; }
  int live_tapes() const { return live_tapes_; }
  int peak_live_tapes() const { return peak_live_tapes_; }

 private:
  std::size_t current_ = 0;
  std::size_t peak_ = 0;
  int live_tapes_ = 0;
  int peak_live_tapes_ = 0;
};

using NodeId = std::size_t;

struct TapeNode {
  NodeId id = 0;
  OpKind op = OpKind::kLeaf;
  std::vector<NodeId> inputs;
  Tensor value;
  // Values computed in the forward pass that only the backward rule needs.
  std::vector<Tensor> saved;
  double scalar = 0.0;
  std::vector<int> labels;
  bool requires_grad = false;
  bool is_variable = false;

  std::size_t accounted_bytes() const;
};

class Tape;

/// Reference to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using GradMap = std::map<NodeId, Tensor>;

struct OpAttrs {
  double scalar = 0.0;
  std::vector<int> labels;
};

class Tape {
 public:
  // When `keep_graph` is false the tape only evaluates values: nothing is
  // saved for a backward pass and backward() is rejected.
  explicit Tape(MemoryMeter* meter = nullptr, bool keep_graph = true);
  ~Tape();

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value);
  Var constant(Tensor value);

  Var record(OpKind op, std::span<const Var> inputs, OpAttrs attrs = {});

  void release();

  bool live() const { return live_; }
  bool keeps_graph() const { return keep_graph_; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t accounted_bytes() const { return bytes_; }
  const TapeNode& node(NodeId id) const;

 private:
  friend GradMap backward(Tape&, std::span<const std::pair<Var, Tensor>>);

  Var push(TapeNode node);
  void check_owned(const Var& v, const char* what) const;

  std::vector<TapeNode> nodes_;
  MemoryMeter* meter_;
  bool keep_graph_;
  bool live_ = true;
  std::size_t bytes_ = 0;
};

/// Gradients of `root` contracted with `seed`, for every variable leaf.
GradMap backward(Tape& tape, Var root, const Tensor& seed);

/// Multi-seed form: each (node, seed) pair adds `seed` to that node's
/// gradient at the moment the node is reached in the reverse sweep, after
/// all contributions from its consumers have been accumulated.
GradMap backward(Tape& tape, std::span<const std::pair<Var, Tensor>> seeds);

// Primitive wrappers. All operands must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var add_bias(Var x, Var bias);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sqrt(Var a);
Var sum(Var a);
Var mean(Var a);
Var concat(Var a, Var b);
// Per-row cross-entropy of logits [B, K] (or [K]) against labels; returns
// shape [B] (or a scalar for rank-1 logits).
Var softmax_xent(Var logits, std::vector<int> labels);

/// Central-difference gradient of a scalar function.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h);

}  // namespace dpa::ad
