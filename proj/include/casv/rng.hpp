// Copyright (c) 2026 The casv Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CASV_RNG_HPP_
#define CASV_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace casv {

/// Seeded random source used everywhere randomness is needed.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The distributions from <random> are implementation-defined, so
/// the few we need are written out here; results are identical across
/// platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n). Unbiased (rejection sampling). n > 0.
  uint64_t uniform_index(uint64_t n);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached second value).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  /// Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

  /// k distinct indices from [0, n), in sampling order. k is capped at n.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k);

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer.
uint64_t mix64(uint64_t x);

/// Sub-seed derived from a parent seed and a tag (FNV-1a over the tag).
uint64_t derive_seed(uint64_t seed, std::string_view tag);
uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

}  // namespace casv

#endif  // CASV_RNG_HPP_
