// Copyright 2026 The moeforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MOEFORGE_RNG_HPP_
#define MOEFORGE_RNG_HPP_

#include <cstddef>
#include <cstdint>
#include <random>

namespace moeforge {

/// Seeded deterministic generator.
///
/// Engine: std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard distributions are implementation-defined, so the
/// transforms on top are written out here:
///   uniform()       top 53 bits of one draw scaled by 2^-53, in [0, 1)
///   index(n)        rejection sampling on the top bits, unbiased
///   normal()        Marsaglia polar method, one cached spare value
/// `fork(stream)` derives an independent child generator from this one's seed
/// and a stream id through SplitMix64, so sub-streams never depend on how many
/// values the parent has produced.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). Requires n >= 1.
  std::size_t index(std::size_t n);
  double normal();
  double normal(double mean, double stddev);

  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer, used to derive child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace moeforge

#endif  // MOEFORGE_RNG_HPP_
