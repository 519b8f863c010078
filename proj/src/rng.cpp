// SPDX-License-Identifier: Apache-2.0

#include "dpa/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dpa::rng {

std::uint64_t hash_label(std::string_view label) {
  // FNV-1a, 64-bit.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    auto lo0 = static_cast<std::uint32_t>(p0);
    auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

Stream::Stream(std::uint64_t seed, std::string_view label)
    : state_{seed, hash_label(label), 0} {}

Stream Stream::restore(const StreamState& state) { return Stream(state); }

std::array<std::uint32_t, 4> Stream::next_block() {
  const std::uint64_t c = state_.counter++;
  std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
      static_cast<std::uint32_t>(state_.label_hash),
      static_cast<std::uint32_t>(state_.label_hash >> 32)};
  std::array<std::uint32_t, 2> key = {
      static_cast<std::uint32_t>(state_.seed),
      static_cast<std::uint32_t>(state_.seed >> 32)};
  return philox4x32(ctr, key);
}

std::uint64_t Stream::next_u64() {
  auto b = next_block();
  return (std::uint64_t{b[1]} << 32) | b[0];
}

double Stream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Stream::normal() {
  auto b = next_block();
  std::uint64_t a = (std::uint64_t{b[1]} << 32) | b[0];
  std::uint64_t c = (std::uint64_t{b[3]} << 32) | b[2];
  // u1 in (0, 1] keeps the log finite.
  double u1 = static_cast<double>((a >> 11) + 1) * 0x1.0p-53;
  double u2 = static_cast<double>(c >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t Stream::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());
  // Rejection sampling removes modulo bias.
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return lo + static_cast<std::int64_t>(v % span);
}

double Stream::rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

Tensor Stream::normal_tensor(const Shape& shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal();
  return Tensor(shape, std::move(v));
}

Tensor Stream::uniform_tensor(const Shape& shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * uniform();
  return Tensor(shape, std::move(v));
}

Key Key::child(std::string_view label) const {
  if (prefix_.empty()) return Key(seed_, std::string(label));
  return Key(seed_, prefix_ + "/" + std::string(label));
}

Stream Key::stream(std::string_view label) const {
  if (prefix_.empty()) return Stream(seed_, label);
  return Stream(seed_, prefix_ + "/" + std::string(label));
}

}  // namespace dpa::rng
