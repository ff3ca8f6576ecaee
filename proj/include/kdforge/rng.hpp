// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

namespace kdforge {

/// xoshiro256** seeded through SplitMix64 from (seed, stream). All draws are
/// derived from integer arithmetic so identical (seed, stream) pairs give the
/// same integer sequence on every platform. Distributions are implemented here
/// rather than taken from <random>, whose distributions are
/// implementation-defined.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  /// Independent generator for a sub-task, keyed by stream index.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  /// Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Standard normal via the polar method (one value per call, spare cached).
  double normal() noexcept;
  /// Normal(0, stddev^2) resampled until within +-bound_sigma * stddev.
  double truncated_normal(double stddev, double bound_sigma = 2.0) noexcept;

  const State& state() const noexcept { return s_; }
  void set_state(const State& s) noexcept {
    s_ = s;
    has_spare_ = false;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  State s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& x) noexcept;

}  // namespace kdforge
