// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random streams. Every draw is a pure function of
// (seed, label, counter), so any stream can be restored from a captured
// state and replayed bit for bit.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dpa/tensor.hpp"

namespace dpa::rng {

std::uint64_t hash_label(std::string_view label);

/// Philox4x32 with 10 rounds.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

struct StreamState {
  std::uint64_t seed = 0;
  std::uint64_t label_hash = 0;
  std::uint64_t counter = 0;

  bool operator==(const StreamState&) const = default;
};

class Stream {
 public:
  Stream(std::uint64_t seed, std::string_view label);
  static Stream restore(const StreamState& state);

  StreamState state() const { return state_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; consumes exactly one counter block.
  double normal();
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // +1 or -1 with equal probability.
  double rademacher();

  Tensor normal_tensor(const Shape& shape);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

 private:
  explicit Stream(StreamState state) : state_(state) {}
  std::array<std::uint32_t, 4> next_block();

  StreamState state_;
};

/// Hierarchical stream naming: a Key is a seed plus a label prefix, and
/// streams are addressed by appending "/<label>" to the prefix, e.g.
/// "seed=0/attack/iter=3/eot=1" + "/purify/fwd/step=7".
class Key {
 public:
  explicit Key(std::uint64_t seed, std::string prefix = {})
      : seed_(seed), prefix_(std::move(prefix)) {}

  Key child(std::string_view label) const;
  Stream stream(std::string_view label) const;

  std::uint64_t seed() const { return seed_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::uint64_t seed_;
  std::string prefix_;
};

}  // namespace dpa::rng
