// SPDX-License-Identifier: Apache-2.0

#include "dpa/ad.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "kernels.hpp"

namespace dpa::ad {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kConcat: return "concat";
    case OpKind::kSoftmaxXent: return "softmax_xent";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// MemoryMeter

void MemoryMeter::add(std::size_t bytes) {
  current_ += bytes;
  peak_ = std::max(peak_, current_);
}

void MemoryMeter::sub(std::size_t bytes) { current_ -= bytes; }

void MemoryMeter::tape_opened() {
  ++live_tapes_;
  peak_live_tapes_ = std::max(peak_live_tapes_, live_tapes_);
}

void MemoryMeter::tape_closed() { --live_tapes_; }

void MemoryMeter::reset() {
  peak_ = current_;
  peak_live_tapes_ = live_tapes_;
}

std::size_t TapeNode::accounted_bytes() const {
  std::size_t b = value.bytes() + labels.size() * sizeof(int);
  for (const auto& s : saved) b += s.bytes();
  return b;
}

const Tensor& Var::value() const {
  if (tape == nullptr) throw TapeError("var: not bound to a tape");
  return tape->node(id).value;
}

// ---------------------------------------------------------------------------
// Forward evaluation

namespace {

std::string shapes_of(OpKind op, std::span<const Tensor* const> xs) {
  std::string s = std::string(op_name(op)) + " with shapes";
  for (auto* x : xs) s += " " + shape_str(x->shape());
  return s;
}

[[noreturn]] void shape_fail(OpKind op, std::span<const Tensor* const> xs,
                             const std::string& why) {
  throw ShapeError(shapes_of(op, xs) + ": " + why);
}

template <typename F>
Tensor map1(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor(a.shape(), std::move(out));
}

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.size());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

struct MatDims {
  std::size_t m, k, n;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b) {
  const Tensor* xs[] = {&a, &b};
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) {
    shape_fail(OpKind::kMatmul, xs, "operands must be rank 1 or 2");
  }
  std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
  std::size_t k = a.rank() == 2 ? a.dim(1) : a.dim(0);
  std::size_t kb = b.dim(0);
  std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  if (k != kb) shape_fail(OpKind::kMatmul, xs, "inner dimensions differ");
  return {m, k, n};
}

Shape matmul_shape(const Tensor& a, const Tensor& b, const MatDims& d) {
  if (a.rank() == 2 && b.rank() == 2) return {d.m, d.n};
  if (a.rank() == 2) return {d.m};
  if (b.rank() == 2) return {d.n};
  return {};
}

struct Forward {
  Tensor value;
  std::vector<Tensor> saved;
};

Forward evaluate(OpKind op, std::span<const Tensor* const> xs,
                 const OpAttrs& attrs) {
  auto arity = [&](std::size_t n) {
    if (xs.size() != n) {
      shape_fail(op, xs, "expects " + std::to_string(n) + " operand(s)");
    }
  };
  auto same = [&]() {
    if (xs[0]->shape() != xs[1]->shape()) shape_fail(op, xs, "shape mismatch");
  };
  switch (op) {
    case OpKind::kLeaf:
      throw TapeError("record: leaf nodes are created with variable/constant");
    case OpKind::kAdd:
      arity(2);
      same();
      return {map2(*xs[0], *xs[1], [](double a, double b) { return a + b; }),
              {}};
    case OpKind::kSub:
      arity(2);
      same();
      return {map2(*xs[0], *xs[1], [](double a, double b) { return a - b; }),
              {}};
    case OpKind::kMul:
      arity(2);
      same();
      return {map2(*xs[0], *xs[1], [](double a, double b) { return a * b; }),
              {}};
    case OpKind::kScale: {
      arity(1);
      double s = attrs.scalar;
      return {map1(*xs[0], [s](double a) { return a * s; }), {}};
    }
    case OpKind::kMatmul: {
      arity(2);
      const Tensor& a = *xs[0];
      const Tensor& b = *xs[1];
      auto d = matmul_dims(a, b);
      std::vector<double> out(d.m * d.n);
      kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), d.m, d.k,
                       d.n);
      return {Tensor(matmul_shape(a, b, d), std::move(out)), {}};
    }
    case OpKind::kAddBias: {
      arity(2);
      const Tensor& x = *xs[0];
      const Tensor& b = *xs[1];
      if (b.rank() != 1 || x.rank() < 1 || x.cols() != b.dim(0)) {
        shape_fail(op, xs, "bias must be rank 1 matching the last dimension");
      }
      std::vector<double> out(x.data().begin(), x.data().end());
      std::size_t n = b.dim(0);
      auto bv = b.data();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
      return {Tensor(x.shape(), std::move(out)), {}};
    }
    case OpKind::kTanh:
      arity(1);
      return {map1(*xs[0], [](double a) { return std::tanh(a); }), {}};
    case OpKind::kRelu:
      arity(1);
      return {map1(*xs[0], [](double a) { return a > 0.0 ? a : 0.0; }), {}};
    case OpKind::kExp:
      arity(1);
      return {map1(*xs[0], [](double a) { return std::exp(a); }), {}};
    case OpKind::kLog:
      arity(1);
      for (double v : xs[0]->data()) {
        if (!(v > 0.0)) shape_fail(op, xs, "argument must be positive");
      }
      return {map1(*xs[0], [](double a) { return std::log(a); }), {}};
    case OpKind::kSquare:
      arity(1);
      return {map1(*xs[0], [](double a) { return a * a; }), {}};
    case OpKind::kSqrt:
      arity(1);
      for (double v : xs[0]->data()) {
        if (v < 0.0) shape_fail(op, xs, "argument must be non-negative");
      }
      return {map1(*xs[0], [](double a) { return std::sqrt(a); }), {}};
    case OpKind::kSum:
      arity(1);
      return {Tensor::scalar(sum_all(*xs[0])), {}};
    case OpKind::kMean: {
      arity(1);
      if (xs[0]->size() == 0) shape_fail(op, xs, "empty operand");
      return {Tensor::scalar(sum_all(*xs[0]) /
                             static_cast<double>(xs[0]->size())),
              {}};
    }
    case OpKind::kConcat: {
      arity(2);
      const Tensor& a = *xs[0];
      const Tensor& b = *xs[1];
      if (a.rank() != b.rank() || a.rank() < 1 || a.rank() > 2 ||
          a.rows() != b.rows()) {
        shape_fail(op, xs, "operands must agree in all but the last axis");
      }
      std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
      std::vector<double> out(r * (ca + cb));
      auto av = a.data();
      auto bv = b.data();
      for (std::size_t i = 0; i < r; ++i) {
        std::copy_n(av.begin() + i * ca, ca, out.begin() + i * (ca + cb));
        std::copy_n(bv.begin() + i * cb, cb,
                    out.begin() + i * (ca + cb) + ca);
      }
      Shape s = a.rank() == 2 ? Shape{r, ca + cb} : Shape{ca + cb};
      return {Tensor(std::move(s), std::move(out)), {}};
    }
    case OpKind::kSoftmaxXent: {
      arity(1);
      const Tensor& z = *xs[0];
      if (z.rank() < 1 || z.rank() > 2) {
        shape_fail(op, xs, "logits must be rank 1 or 2");
      }
      std::size_t rows = z.rows(), k = z.cols();
      if (attrs.labels.size() != rows) {
        shape_fail(op, xs,
                   "expected " + std::to_string(rows) + " labels, got " +
                       std::to_string(attrs.labels.size()));
      }
      std::vector<double> loss(rows), probs(rows * k);
      auto zv = z.data();
      for (std::size_t r = 0; r < rows; ++r) {
        int y = attrs.labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
          throw std::out_of_range("softmax_xent: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(k) + ")");
        }
        const double* row = zv.data() + r * k;
        std::size_t arg = static_cast<std::size_t>(
            std::max_element(row, row + k) - row);
        double mx = row[arg];
        double rest = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          double e = std::exp(row[j] - mx);
          probs[r * k + j] = e;
          if (j != arg) rest += e;
        }
        double lse = std::log1p(rest);  // log sum exp(row - mx)
        double denom = 1.0 + rest;
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= denom;
        // Saved as d loss / d z. When the label holds the max, p_y - 1 is
        // formed as -rest / denom to avoid cancellation near saturation.
        auto yi = static_cast<std::size_t>(y);
        probs[r * k + yi] = yi == arg ? -rest / denom : probs[r * k + yi] - 1.0;
        loss[r] = lse - (row[yi] - mx);
      }
      Shape s = z.rank() == 2 ? Shape{rows} : Shape{};
      return {Tensor(std::move(s), std::move(loss)),
              {Tensor(z.shape(), std::move(probs))}};
    }
  }
  throw TapeError("record: unknown op");
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(MemoryMeter* meter, bool keep_graph)
    : meter_(meter), keep_graph_(keep_graph) {
  if (meter_) meter_->tape_opened();
}

Tape::~Tape() { release(); }

const TapeNode& Tape::node(NodeId id) const {
  if (!live_) throw TapeError("tape: access after release");
  if (id >= nodes_.size()) {
    throw TapeError("tape: node " + std::to_string(id) + " not on this tape");
  }
  return nodes_[id];
}

void Tape::check_owned(const Var& v, const char* what) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw TapeError(std::string(what) + ": operand is not on this tape");
  }
}

Var Tape::push(TapeNode node) {
  if (!live_) throw TapeError("tape: record after release");
  node.id = nodes_.size();
  if (!keep_graph_) {
    node.saved.clear();
    node.requires_grad = false;
  }
  std::size_t b = node.accounted_bytes();
  bytes_ += b;
  if (meter_) meter_->add(b);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.back().id};
}

Var Tape::variable(Tensor value) {
  TapeNode n;
  n.op = OpKind::kLeaf;
  n.value = std::move(value);
  n.requires_grad = keep_graph_;
  n.is_variable = keep_graph_;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  TapeNode n;
  n.op = OpKind::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::record(OpKind op, std::span<const Var> inputs, OpAttrs attrs) {
  if (!live_) {
    throw TapeError(std::string("record ") + op_name(op) +
                    ": tape has been released");
  }
  std::vector<const Tensor*> xs;
  xs.reserve(inputs.size());
  TapeNode n;
  n.op = op;
  for (const auto& v : inputs) {
    check_owned(v, op_name(op));
    xs.push_back(&nodes_[v.id].value);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  auto fwd = evaluate(op, xs, attrs);
  n.value = std::move(fwd.value);
  n.scalar = attrs.scalar;
  if (n.requires_grad) {
    n.saved = std::move(fwd.saved);
    n.labels = std::move(attrs.labels);
  }
  return push(std::move(n));
}

void Tape::release() {
  if (!live_) return;
  if (meter_) {
    meter_->sub(bytes_);
    meter_->tape_closed();
  }
  bytes_ = 0;
  nodes_.clear();
  nodes_.shrink_to_fit();
  live_ = false;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
  if (!slot) {
    slot = g;
  } else {
    slot = *slot + g;
  }
}

// Input gradients for one node; entries are empty for inputs that need none.
std::vector<std::optional<Tensor>> vjp(const TapeNode& node,
                                       const std::vector<TapeNode>& nodes,
                                       const Tensor& g) {
  std::vector<std::optional<Tensor>> out(node.inputs.size());
  auto needs = [&](std::size_t i) {
    return nodes[node.inputs[i]].requires_grad;
  };
  auto in = [&](std::size_t i) -> const Tensor& {
    return nodes[node.inputs[i]].value;
  };
  const Tensor& y = node.value;
  switch (node.op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd:
      if (needs(0)) out[0] = g;
      if (needs(1)) out[1] = g;
      break;
    case OpKind::kSub:
      if (needs(0)) out[0] = g;
      if (needs(1)) out[1] = map1(g, [](double v) { return -v; });
      break;
    case OpKind::kMul:
      if (needs(0)) out[0] = hadamard(g, in(1));
      if (needs(1)) out[1] = hadamard(g, in(0));
      break;
    case OpKind::kScale: {
      double s = node.scalar;
      out[0] = map1(g, [s](double v) { return v * s; });
      break;
    }
    case OpKind::kMatmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      auto d = matmul_dims(a, b);
      if (needs(0)) {
        std::vector<double> ga(d.m * d.k);
        kernels::gemm_nt(g.data().data(), b.data().data(), ga.data(), d.m,
                         d.n, d.k);
        out[0] = Tensor(a.shape(), std::move(ga));
      }
      if (needs(1)) {
        std::vector<double> gb(d.k * d.n);
        kernels::gemm_tn(a.data().data(), g.data().data(), gb.data(), d.m,
                         d.k, d.n);
        out[1] = Tensor(b.shape(), std::move(gb));
      }
      break;
    }
    case OpKind::kAddBias: {
      if (needs(0)) out[0] = g;
      if (needs(1)) {
        std::size_t n = in(1).dim(0);
        std::vector<double> gb(n, 0.0);
        auto gv = g.data();
        for (std::size_t i = 0; i < gv.size(); ++i) gb[i % n] += gv[i];
        out[1] = Tensor(in(1).shape(), std::move(gb));
      }
      break;
    }
    case OpKind::kTanh:
      out[0] = map2(g, y, [](double gv, double yv) {
        return gv * (1.0 - yv * yv);
      });
      break;
    case OpKind::kRelu:
      out[0] = map2(g, in(0), [](double gv, double xv) {
        return xv > 0.0 ? gv : 0.0;
      });
      break;
    case OpKind::kExp:
      out[0] = hadamard(g, y);
      break;
    case OpKind::kLog:
      out[0] = map2(g, in(0), [](double gv, double xv) { return gv / xv; });
      break;
    case OpKind::kSquare:
      out[0] = map2(g, in(0), [](double gv, double xv) {
        return gv * 2.0 * xv;
      });
      break;
    case OpKind::kSqrt:
      out[0] = map2(g, y, [](double gv, double yv) {
        return gv / (2.0 * yv);
      });
      break;
    case OpKind::kSum:
      out[0] = Tensor::full(in(0).shape(), g.item());
      break;
    case OpKind::kMean:
      out[0] = Tensor::full(in(0).shape(),
                            g.item() / static_cast<double>(in(0).size()));
      break;
    case OpKind::kConcat: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
      auto gv = g.data();
      if (needs(0)) {
        std::vector<double> ga(r * ca);
        for (std::size_t i = 0; i < r; ++i) {
          std::copy_n(gv.begin() + i * (ca + cb), ca, ga.begin() + i * ca);
        }
        out[0] = Tensor(a.shape(), std::move(ga));
      }
      if (needs(1)) {
        std::vector<double> gb(r * cb);
        for (std::size_t i = 0; i < r; ++i) {
          std::copy_n(gv.begin() + i * (ca + cb) + ca, cb,
                      gb.begin() + i * cb);
        }
        out[1] = Tensor(b.shape(), std::move(gb));
      }
      break;
    }
    case OpKind::kSoftmaxXent: {
      const Tensor& dz = node.saved.at(0);
      std::size_t rows = dz.rows(), k = dz.cols();
      std::vector<double> gz(dz.data().begin(), dz.data().end());
      auto gv = g.data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) gz[r * k + j] *= gv[r];
      }
      out[0] = Tensor(dz.shape(), std::move(gz));
      break;
    }
  }
  return out;
}

}  // namespace

GradMap backward(Tape& tape, Var root, const Tensor& seed) {
  std::pair<Var, Tensor> s{root, seed};
  return backward(tape, std::span<const std::pair<Var, Tensor>>(&s, 1));
}

GradMap backward(Tape& tape, std::span<const std::pair<Var, Tensor>> seeds) {
  if (!tape.live_) throw TapeError("backward: tape has been released");
  if (!tape.keep_graph_) throw TapeError("backward: tape keeps no graph");
  std::map<NodeId, std::vector<const Tensor*>> by_node;
  NodeId top = 0;
  for (const auto& [v, s] : seeds) {
    tape.check_owned(v, "backward");
    const Tensor& val = tape.nodes_[v.id].value;
    if (val.shape() != s.shape()) {
      throw ShapeError("backward: seed shape " + shape_str(s.shape()) +
                       " does not match node shape " +
                       shape_str(val.shape()));
    }
    by_node[v.id].push_back(&s);
    top = std::max(top, v.id);
  }
  GradMap result;
  if (seeds.empty()) return result;

  const auto& nodes = tape.nodes_;
  std::vector<std::optional<Tensor>> grads(top + 1);
  for (NodeId id = top + 1; id-- > 0;) {
    const TapeNode& node = nodes[id];
    if (auto it = by_node.find(id); it != by_node.end()) {
      for (const Tensor* s : it->second) accumulate(grads[id], *s);
    }
    if (!grads[id] || !node.requires_grad) {
      grads[id].reset();
      continue;
    }
    if (node.op == OpKind::kLeaf) {
      if (node.is_variable) result.emplace(id, std::move(*grads[id]));
      grads[id].reset();
      continue;
    }
    auto ins = vjp(node, nodes, *grads[id]);
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (ins[i]) accumulate(grads[node.inputs[i]], *ins[i]);
    }
    grads[id].reset();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Primitive wrappers

namespace {

Tape& same_tape(std::initializer_list<Var> vs, OpKind op) {
  Tape* t = vs.begin()->tape;
  for (const auto& v : vs) {
    if (v.tape == nullptr || v.tape != t) {
      throw TapeError(std::string(op_name(op)) +
                      ": operands live on different tapes");
    }
  }
  return *t;
}

Var rec1(OpKind op, Var a, OpAttrs attrs = {}) {
  Var xs[] = {a};
  return same_tape({a}, op).record(op, xs, std::move(attrs));
}

Var rec2(OpKind op, Var a, Var b) {
  Var xs[] = {a, b};
  return same_tape({a, b}, op).record(op, xs);
}

}  // namespace

Var add(Var a, Var b) { return rec2(OpKind::kAdd, a, b); }
Var sub(Var a, Var b) { return rec2(OpKind::kSub, a, b); }
Var mul(Var a, Var b) { return rec2(OpKind::kMul, a, b); }
Var scale(Var a, double s) { return rec1(OpKind::kScale, a, {s, {}}); }
Var matmul(Var a, Var b) { return rec2(OpKind::kMatmul, a, b); }
Var add_bias(Var x, Var bias) { return rec2(OpKind::kAddBias, x, bias); }
Var tanh(Var a) { return rec1(OpKind::kTanh, a); }
Var relu(Var a) { return rec1(OpKind::kRelu, a); }
Var exp(Var a) { return rec1(OpKind::kExp, a); }
Var log(Var a) { return rec1(OpKind::kLog, a); }
Var square(Var a) { return rec1(OpKind::kSquare, a); }
Var sqrt(Var a) { return rec1(OpKind::kSqrt, a); }
Var sum(Var a) { return rec1(OpKind::kSum, a); }
Var mean(Var a) { return rec1(OpKind::kMean, a); }
Var concat(Var a, Var b) { return rec2(OpKind::kConcat, a, b); }

Var softmax_xent(Var logits, std::vector<int> labels) {
  return rec1(OpKind::kSoftmaxXent, logits, {0.0, std::move(labels)});
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be > 0");
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp.mutable_data()[i] += h;
    xm.mutable_data()[i] -= h;
    double fp = f(xp);
    double fm = f(xm);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("finite_diff_grad: non-finite function value at "
                              "coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

}  // namespace dpa::ad
