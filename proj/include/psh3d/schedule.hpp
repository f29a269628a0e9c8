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

// Bucket-and-Swin scope scheduling. Scopes group whole buckets; moving to a
// new round only changes which bucket ranges are grouped, never where the
// features live.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/matrix.hpp"
#include "psh3d/psh.hpp"

namespace psh3d {

/// Row ranges of the attention buckets of a scattered array. Per batch:
/// the K regular buckets in id order, then the recycle region split into
/// S-row pseudo-buckets (the last one possibly short).
struct BucketLayout {
  std::vector<IndexRange> buckets;
  std::vector<std::int64_t> batch;        // batch of each attention bucket
  std::vector<std::size_t> batch_begin;   // first attention bucket of each batch, plus end
  std::size_t num_points = 0;

  std::size_t size() const noexcept { return buckets.size(); }
  std::size_t num_batches() const noexcept { return batch_begin.empty() ? 0 : batch_begin.size() - 1; }
};

inline BucketLayout bucket_layout(const BucketAssignment& a) {
  BucketLayout l;
  l.num_points = a.size();
  for (std::int64_t b = 0; b < a.num_batches; ++b) {
    l.batch_begin.push_back(l.buckets.size());
    const auto slot0 = b * a.slots_per_batch();
    for (std::int64_t k = 0; k < a.num_buckets; ++k) {
      const auto s = static_cast<std::size_t>(slot0 + k);
      const auto lo = static_cast<std::size_t>(a.bucket_base[s]);
      l.buckets.push_back({lo, lo + static_cast<std::size_t>(a.counts[s])});
      l.batch.push_back(b);
    }
    const auto r = static_cast<std::size_t>(a.recycle_slot(b));
    const auto lo = static_cast<std::size_t>(a.bucket_base[r]);
    const auto hi = lo + static_cast<std::size_t>(a.counts[r]);
    for (std::size_t p = lo; p < hi; p += static_cast<std::size_t>(a.capacity)) {
      l.buckets.push_back({p, std::min(hi, p + static_cast<std::size_t>(a.capacity))});
      l.batch.push_back(b);
    }
  }
  l.batch_begin.push_back(l.buckets.size());
  return l;
}

using Scope = std::vector<std::size_t>;  // attention bucket ids
using Round = std::vector<Scope>;

struct ScopeSchedule {
  std::size_t num_buckets = 0;
  std::size_t window = 1;
  std::size_t stride = 1;
  std::size_t shift = 0;
  std::vector<Round> rounds;

  /// Every round must partition [0, num_buckets).
  void validate() const {
    for (std::size_t t = 0; t < rounds.size(); ++t) {
      std::vector<int> seen(num_buckets, 0);
      for (const auto& scope : rounds[t]) {
        if (scope.empty()) throw IntegrityError("schedule: round " + std::to_string(t) + " has an empty scope");
        for (auto b : scope) {
          if (b >= num_buckets) throw IntegrityError("schedule: bucket id " + std::to_string(b) + " out of range");
          if (seen[b]++) throw IntegrityError("schedule: bucket " + std::to_string(b) + " repeated in round " +
                                              std::to_string(t));
        }
      }
      for (std::size_t b = 0; b < num_buckets; ++b)
        if (!seen[b]) throw IntegrityError("schedule: bucket " + std::to_string(b) + " missing from round " +
                                           std::to_string(t));
    }
  }
};

/// Round t walks the buckets cyclically from (t * shift) mod window, cuts
/// the walk into groups of window * stride, and within a group forms
/// `stride` scopes from positions r, r + stride, r + 2*stride, ...
/// With stride 1 this is plain windows of `window` buckets; the cyclic walk
/// keeps every round a partition.
inline ScopeSchedule build_schedule(std::size_t num_buckets, std::size_t window, std::size_t stride,
                                    std::size_t shift, std::size_t rounds) {
  if (window < 1) throw ConfigError("schedule: window must be >= 1");
  if (stride < 1) throw ConfigError("schedule: stride must be >= 1");
  if (shift >= window) throw ConfigError("schedule: shift must be < window");
  if (window > num_buckets)
    throw ConfigError("schedule: window " + std::to_string(window) + " exceeds bucket count " +
                      std::to_string(num_buckets));
  ScopeSchedule s{num_buckets, window, stride, shift, {}};
  const std::size_t group = window * stride;
  for (std::size_t t = 0; t < rounds; ++t) {
    const std::size_t start = (t * shift) % window;
    Round round;
    for (std::size_t g = 0; g < num_buckets; g += group) {
      const std::size_t len = std::min(group, num_buckets - g);
      for (std::size_t r = 0; r < stride && r < len; ++r) {
        Scope scope;
        for (std::size_t p = r; p < len; p += stride) scope.push_back((start + g + p) % num_buckets);
        round.push_back(std::move(scope));
      }
    }
    s.rounds.push_back(std::move(round));
  }
  return s;
}

/// Builds one schedule per batch of the layout and merges them round by
/// round, so no scope spans two batches.
inline ScopeSchedule schedule_for_layout(const BucketLayout& layout, std::size_t window, std::size_t stride,
                                         std::size_t shift, std::size_t rounds) {
  ScopeSchedule merged{layout.size(), window, stride, shift, std::vector<Round>(rounds)};
  for (std::size_t b = 0; b < layout.num_batches(); ++b) {
    const std::size_t lo = layout.batch_begin[b];
    auto part = build_schedule(layout.batch_begin[b + 1] - lo, window, stride, shift, rounds);
    for (std::size_t t = 0; t < rounds; ++t)
      for (auto& scope : part.rounds[t]) {
        for (auto& id : scope) id += lo;
        merged.rounds[t].push_back(std::move(scope));
      }
  }
  return merged;
}

/// Row ranges of a scope's buckets, in scope order. Reads only the layout;
/// no feature data is touched.
inline std::vector<IndexRange> logical_gather(const BucketLayout& layout, std::span<const std::size_t> scope) {
  std::vector<IndexRange> out;
  out.reserve(scope.size());
  for (auto b : scope) {
    if (b >= layout.size()) throw IntegrityError("gather: bucket id " + std::to_string(b) + " out of range");
    out.push_back(layout.buckets[b]);
  }
  return out;
}

inline std::vector<IndexRange> logical_gather(const BucketAssignment& a, std::span<const std::size_t> scope) {
  return logical_gather(bucket_layout(a), scope);
}

inline std::size_t total_rows(std::span<const IndexRange> ranges) {
  std::size_t n = 0;
  for (const auto& r : ranges) n += r.size();
  return n;
}

}  // namespace psh3d
