#pragma once

// Counter-based random numbers: Philox4x32-10 (Salmon et al., "Parallel random
// numbers: as easy as 1, 2, 3", SC'11). Each (seed, counter) pair maps to one
// 128-bit block through a fixed integer function, so streams are portable and
// can be split across workers without coordination.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "npl/tensor.hpp"

namespace npl {

namespace detail {

inline void mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace detail

using PhiloxBlock = std::array<std::uint32_t, 4>;

inline PhiloxBlock philox4x32_10(PhiloxBlock ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    detail::mulhilo32(kM0, ctr[0], hi0, lo0);
    detail::mulhilo32(kM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// SplitMix64 finaliser; used only to derive stream seeds from names.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Seed for a named sub-stream ("collect", "train", "eval", ...) of a global seed.
inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view name, std::uint64_t index = 0) {
  return mix64(mix64(global_seed ^ fnv1a64(name)) + index);
}

struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  /// Next 128-bit block; advances the counter by one.
  PhiloxBlock next_block() {
    const PhiloxBlock ctr{static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32), 0u, 0u};
    ++counter;
    return philox4x32_10(ctr, {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
  }
};

namespace detail {

// 53-bit uniform in the open interval (0, 1).
inline double to_open_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

}  // namespace detail

/// Two uniforms in (0, 1) from one block.
inline std::array<double, 2> uniform2(RngStream& stream) {
  const PhiloxBlock b = stream.next_block();
  return {detail::to_open_unit(b[0], b[1]), detail::to_open_unit(b[2], b[3])};
}

inline double uniform(RngStream& stream) { return uniform2(stream)[0]; }

/// I.i.d. standard normals (Box-Muller, two draws per block).
inline Tensor gaussian(RngStream& stream, Shape shape) {
  Tensor out(std::move(shape));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; i += 2) {
    const auto [u1, u2] = uniform2(stream);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    out[i] = r * std::cos(theta);
    if (i + 1 < n) out[i + 1] = r * std::sin(theta);
  }
  return out;
}

/// Index drawn from a discrete distribution with the given (normalised) weights.
inline std::size_t categorical(RngStream& stream, std::span<const double> weights) {
  const double u = uniform(stream);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace npl
