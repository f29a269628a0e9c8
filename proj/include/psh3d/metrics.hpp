/*
 * Copyright (c) 2026, The psh3d Authors.  All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Locality metrics: pair-weighted mean distance between points sharing a
// group, and the same statistic for a random partition with equal sizes.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "psh3d/geometry.hpp"
#include "psh3d/random.hpp"

namespace psh3d {

struct LocalityStats {
  double sum = 0.0;
  double pairs = 0.0;
  double mean() const { return pairs > 0 ? sum / pairs : 0.0; }
};

inline double l2(const Vec3& a, const Vec3& b) {
  const double x = a[0] - b[0], y = a[1] - b[1], z = a[2] - b[2];
  return std::sqrt(x * x + y * y + z * z);
}

/// groups[g] lists point indices into coords.
inline LocalityStats intra_group_distance(std::span<const Vec3> coords,
                                          const std::vector<std::vector<std::size_t>>& groups) {
  LocalityStats s;
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j) {
        s.sum += l2(coords[g[i]], coords[g[j]]);
        s.pairs += 1.0;
      }
  return s;
}

/// Groups `candidates` (all point indices when empty) into a random
/// partition with the given group sizes.
inline std::vector<std::vector<std::size_t>> random_partition(std::span<const std::size_t> sizes, std::size_t n,
                                                              std::uint64_t seed,
                                                              std::span<const std::size_t> candidates = {}) {
  std::vector<std::size_t> idx;
  if (candidates.empty()) {
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  } else {
    idx.assign(candidates.begin(), candidates.end());
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  std::vector<std::vector<std::size_t>> groups;
  std::size_t pos = 0;
  for (auto s : sizes) {
    groups.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos + s));
    pos += s;
  }
  return groups;
}

}  // namespace psh3d
