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

// Perfect spatial hashing: capacity-bounded bucketing with optimistic racing
// rebalancing, the two-stage (block-local) counter variant, bucket bases and
// the contiguous scatter.
//
// A point's slot in the scattered array is
//   dest(i) = bucket_base[bucket_id[i]] + bucket_offset[i]
// and every assignment produced here makes dest a bijection onto [0, N).

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/geometry.hpp"
#include "psh3d/hashing.hpp"
#include "psh3d/matrix.hpp"
#include "psh3d/parallel.hpp"
#include "psh3d/random.hpp"

namespace psh3d {

inline constexpr std::int64_t kDefaultBuckets = 256;
inline constexpr std::int64_t kDefaultCapacity = 512;

/// Output of bucketing. Slot ids are batch * (K + 1) + local, where local
/// value K is that batch's recycle bucket; a single batch uses ids 0..K.
struct BucketAssignment {
  std::vector<std::int64_t> bucket_id;
  std::vector<std::int64_t> bucket_offset;
  std::vector<std::int64_t> counts;       // per slot
  std::vector<std::int64_t> bucket_base;  // exclusive scan of counts
  std::int64_t capacity = kDefaultCapacity;
  std::int64_t num_buckets = kDefaultBuckets;
  std::int64_t num_batches = 1;

  std::size_t size() const noexcept { return bucket_id.size(); }
  std::int64_t slots_per_batch() const noexcept { return num_buckets + 1; }
  std::int64_t num_slots() const noexcept { return num_batches * slots_per_batch(); }
  std::int64_t recycle_slot(std::int64_t batch) const noexcept { return batch * slots_per_batch() + num_buckets; }
  bool is_recycle(std::int64_t slot) const noexcept { return slot % slots_per_batch() == num_buckets; }
  std::int64_t batch_of(std::int64_t slot) const noexcept { return slot / slots_per_batch(); }

  std::int64_t dest(std::size_t i) const { return bucket_base[bucket_id[i]] + bucket_offset[i]; }

  std::int64_t recycle_count() const {
    std::int64_t r = 0;
    for (std::int64_t b = 0; b < num_batches; ++b) r += counts[recycle_slot(b)];
    return r;
  }
  double recycle_fraction() const {
    return size() ? static_cast<double>(recycle_count()) / static_cast<double>(size()) : 0.0;
  }

  /// Throws IntegrityError unless every BucketAssignment invariant holds.
  void validate() const;
};

inline std::vector<std::int64_t> compute_bucket_base(std::span<const std::int64_t> counts) {
  std::vector<std::int64_t> base(counts.size());
  for (auto c : counts)
    if (c < 0) throw IntegrityError("bucket counts must be non-negative");
  std::exclusive_scan(counts.begin(), counts.end(), base.begin(), std::int64_t{0});
  return base;
}

inline void BucketAssignment::validate() const {
  auto fail = [](const std::string& why) { throw IntegrityError("bucket assignment: " + why); };
  const std::size_t n = size();
  if (bucket_offset.size() != n) fail("bucket_offset size differs from bucket_id size");
  if (capacity < 1 || num_buckets < 1 || num_batches < 1) fail("S, K and batch count must be >= 1");
  const auto slots = static_cast<std::size_t>(num_slots());
  if (counts.size() != slots || bucket_base.size() != slots) fail("counts/bucket_base must have B*(K+1) entries");
  if (compute_bucket_base(counts) != bucket_base) fail("bucket_base is not the exclusive scan of counts");
  std::int64_t total = 0;
  for (std::size_t s = 0; s < slots; ++s) {
    if (!is_recycle(static_cast<std::int64_t>(s)) && counts[s] > capacity)
      fail("bucket " + std::to_string(s) + " holds " + std::to_string(counts[s]) + " > S");
    total += counts[s];
  }
  if (total != static_cast<std::int64_t>(n)) fail("counts sum to " + std::to_string(total) + ", not N");
  std::vector<bool> taken(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = bucket_id[i];
    if (b < 0 || b >= num_slots()) fail("point " + std::to_string(i) + " has invalid bucket id");
    const auto off = bucket_offset[i];
    if (off < 0 || off >= counts[b]) fail("point " + std::to_string(i) + " offset outside its bucket");
    const auto d = static_cast<std::size_t>(bucket_base[b] + off);
    if (taken[d]) fail("destination " + std::to_string(d) + " claimed twice");
    taken[d] = true;
  }
}

/// Perturbations tried by optimistic racing, in order.
struct ProbeSchedule {
  std::vector<Voxel> offsets;
  std::size_t max_probes = 32;
  std::uint64_t seed = 0;

  std::size_t probe_count() const noexcept { return std::min(max_probes, offsets.size()); }

  void validate() const {
    if (offsets.empty()) throw ConfigError("probe schedule: offsets must be non-empty");
    for (const auto& d : offsets)
      if (d == Voxel{0, 0, 0}) throw ConfigError("probe schedule: (0,0,0) is not a perturbation");
  }
};

/// The 26 radius-1 then 98 radius-2 L-inf neighbour offsets, each ring in
/// lexicographic order, or shuffled within its ring when `shuffle` is set.
inline ProbeSchedule default_probe_schedule(std::uint64_t seed = 0, bool shuffle = false,
                                            std::size_t max_probes = 32) {
  ProbeSchedule ps;
  ps.max_probes = max_probes;
  ps.seed = seed;
  Rng rng(seed);
  for (std::int64_t r = 1; r <= 2; ++r) {
    std::vector<Voxel> ring;
    for (std::int64_t x = -r; x <= r; ++x)
      for (std::int64_t y = -r; y <= r; ++y)
        for (std::int64_t z = -r; z <= r; ++z)
          if (std::max({std::abs(x), std::abs(y), std::abs(z)}) == r) ring.push_back({x, y, z});
    if (shuffle) rng.shuffle(std::span<Voxel>(ring));
    ps.offsets.insert(ps.offsets.end(), ring.begin(), ring.end());
  }
  return ps;
}

// Counter arrays used by the racing protocol. load / fetch_add / fetch_sub
// mirror the atomics; fetch_* return the pre-operation value.

class SequentialCounters {
 public:
  explicit SequentialCounters(std::size_t n) : c_(n, 0) {}
  std::int64_t load(std::size_t b) const { return c_[b]; }
  std::int64_t fetch_add(std::size_t b, std::int64_t n = 1) {
    auto prev = c_[b];
    c_[b] += n;
    return prev;
  }
  std::int64_t fetch_sub(std::size_t b, std::int64_t n = 1) {
    auto prev = c_[b];
    c_[b] -= n;
    return prev;
  }
  std::size_t size() const noexcept { return c_.size(); }

 private:
  std::vector<std::int64_t> c_;
};

class AtomicCounters {
 public:
  explicit AtomicCounters(std::size_t n) : n_(n), c_(std::make_unique<std::atomic<std::int64_t>[]>(n)) {
    for (std::size_t i = 0; i < n; ++i) c_[i].store(0, std::memory_order_relaxed);
  }
  std::int64_t load(std::size_t b) const { return c_[b].load(std::memory_order_acquire); }
  std::int64_t fetch_add(std::size_t b, std::int64_t n = 1) { return c_[b].fetch_add(n, std::memory_order_acq_rel); }
  std::int64_t fetch_sub(std::size_t b, std::int64_t n = 1) { return c_[b].fetch_sub(n, std::memory_order_acq_rel); }
  std::size_t size() const noexcept { return n_; }

 private:
  std::size_t n_;
  std::unique_ptr<std::atomic<std::int64_t>[]> c_;
};

/// One attempted claim, for auditing recycle decisions in tests.
struct ProbeEvent {
  enum class Outcome { Full, Claimed, RolledBack, OutOfDomain, Recycled };
  std::size_t point;
  std::int64_t bucket;  // batch-local bucket id; K for recycle
  std::int64_t observed;
  Outcome outcome;
};

using RaceTrace = std::vector<ProbeEvent>;

/// Claim-then-verify on one bucket. Returns the claimed offset, or nullopt
/// when the bucket was already full or the increment overshot and was
/// rolled back. A slot is valid iff the pre-increment count was < S.
template <typename Counters>
std::optional<std::int64_t> try_claim(Counters& counters, std::size_t bucket, std::int64_t capacity,
                                      std::size_t point = 0, RaceTrace* trace = nullptr) {
  const auto seen = counters.load(bucket);
  if (seen >= capacity) {
    if (trace) trace->push_back({point, static_cast<std::int64_t>(bucket), seen, ProbeEvent::Outcome::Full});
    return std::nullopt;
  }
  const auto prev = counters.fetch_add(bucket, 1);
  if (prev < capacity) {
    if (trace) trace->push_back({point, static_cast<std::int64_t>(bucket), prev, ProbeEvent::Outcome::Claimed});
    return prev;
  }
  counters.fetch_sub(bucket, 1);
  if (trace) trace->push_back({point, static_cast<std::int64_t>(bucket), prev, ProbeEvent::Outcome::RolledBack});
  return std::nullopt;
}

struct Claim {
  std::int64_t bucket;  // batch-local; K means recycle
  std::int64_t offset;
  friend bool operator==(const Claim&, const Claim&) = default;
};

/// Reassigns a point whose hashed bucket is full: walks the probe offsets,
/// hashing each perturbed voxel and racing for a slot; after max_probes the
/// point goes to the (unbounded) recycle bucket at index K of `counters`.
template <typename Counters>
Claim optimistic_race(std::size_t point, const Voxel& v, Counters& counters, std::int64_t capacity,
                      const HashConfig& cfg, const ProbeSchedule& probes, RaceTrace* trace = nullptr) {
  const std::size_t recycle = cfg.num_buckets;
  for (std::size_t p = 0; p < probes.probe_count(); ++p) {
    const auto& d = probes.offsets[p];
    const Voxel pv{v[0] + d[0], v[1] + d[1], v[2] + d[2]};
    if (!in_hash_domain(pv, cfg)) {
      if (trace) trace->push_back({point, -1, 0, ProbeEvent::Outcome::OutOfDomain});
      continue;
    }
    const auto h = hash_bucket(pv, cfg);
    if (auto off = try_claim(counters, h, capacity, point, trace)) return {h, *off};
  }
  const auto off = counters.fetch_add(recycle, 1);
  if (trace) trace->push_back({point, static_cast<std::int64_t>(recycle), off, ProbeEvent::Outcome::Recycled});
  return {static_cast<std::int64_t>(recycle), off};
}

/// Hashed bucket first, optimistic racing when it is full.
template <typename Counters>
Claim claim_slot(std::size_t point, const Voxel& v, Counters& counters, std::int64_t capacity,
                 const HashConfig& cfg, const ProbeSchedule& probes, RaceTrace* trace = nullptr) {
  const auto h = hash_bucket(v, cfg);
  if (auto off = try_claim(counters, h, capacity, point, trace)) return {h, *off};
  return optimistic_race(point, v, counters, capacity, cfg, probes, trace);
}

struct AssignOptions {
  /// Batches are independent and may be bucketed concurrently; results do
  /// not depend on this value.
  std::size_t threads = 1;
  /// Receives every claim attempt, batch by batch in point order.
  RaceTrace* trace = nullptr;
};

namespace detail {

struct BatchPlan {
  std::int64_t num_batches = 0;
  std::vector<std::vector<std::size_t>> members;  // point indices per batch, ascending
};

inline BatchPlan plan_batches(std::span<const Voxel> voxels, std::span<const std::int32_t> batch_id,
                              const HashConfig& cfg, std::int64_t capacity, const ProbeSchedule& probes) {
  cfg.validate();
  probes.validate();
  if (capacity < 1) throw ConfigError("bucketing: capacity S must be >= 1");
  if (voxels.size() != batch_id.size()) throw IntegrityError("bucketing: voxel/batch size mismatch");
  if (voxels.empty()) throw EmptyInputError("bucketing: no points");
  BatchPlan plan;
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    if (batch_id[i] < 0) throw IntegrityError("bucketing: negative batch id");
    const auto b = static_cast<std::size_t>(batch_id[i]);
    if (b >= plan.members.size()) plan.members.resize(b + 1);
    plan.members[b].push_back(i);
    detail::require_non_negative(voxels[i]);
  }
  for (std::size_t b = 0; b < plan.members.size(); ++b)
    if (plan.members[b].empty()) throw IntegrityError("bucketing: batch " + std::to_string(b) + " is empty");
  plan.num_batches = static_cast<std::int64_t>(plan.members.size());
  return plan;
}

inline BucketAssignment empty_assignment(std::size_t n, const HashConfig& cfg, std::int64_t capacity,
                                         std::int64_t batches) {
  BucketAssignment a;
  a.num_buckets = cfg.num_buckets;
  a.capacity = capacity;
  a.num_batches = batches;
  a.bucket_id.assign(n, -1);
  a.bucket_offset.assign(n, -1);
  a.counts.assign(static_cast<std::size_t>(a.num_slots()), 0);
  return a;
}

inline void finish_assignment(BucketAssignment& a) {
  std::fill(a.counts.begin(), a.counts.end(), 0);
  for (auto b : a.bucket_id) ++a.counts[b];
  a.bucket_base = compute_bucket_base(a.counts);
}

inline void merge_traces(std::vector<RaceTrace>& per_batch, RaceTrace* out) {
  if (!out) return;
  for (auto& t : per_batch) out->insert(out->end(), t.begin(), t.end());
}

}  // namespace detail

/// Batch bucketing and balancing. Points in each batch are claimed in
/// ascending index order against sequential counters, which is one legal
/// linearisation of the atomic increments and makes the result deterministic.
inline BucketAssignment assign_buckets(std::span<const Voxel> voxels, std::span<const std::int32_t> batch_id,
                                       const HashConfig& cfg, std::int64_t capacity, const ProbeSchedule& probes,
                                       const AssignOptions& opts = {}) {
  auto plan = detail::plan_batches(voxels, batch_id, cfg, capacity, probes);
  auto a = detail::empty_assignment(voxels.size(), cfg, capacity, plan.num_batches);
  std::vector<RaceTrace> traces(opts.trace ? plan.members.size() : 0);
  parallel_for(plan.members.size(), opts.threads, [&](std::size_t b) {
    SequentialCounters counters(cfg.num_buckets + 1);
    RaceTrace* trace = opts.trace ? &traces[b] : nullptr;
    const auto slot0 = static_cast<std::int64_t>(b) * a.slots_per_batch();
    for (std::size_t i : plan.members[b]) {
      const auto c = claim_slot(i, voxels[i], counters, capacity, cfg, probes, trace);
      a.bucket_id[i] = slot0 + c.bucket;
      a.bucket_offset[i] = c.offset;
    }
  });
  detail::merge_traces(traces, opts.trace);
  detail::finish_assignment(a);
  return a;
}

struct TwoStageOptions {
  std::size_t block_size = 256;
  /// false: blocks run in order against an exact snapshot of the global
  /// counters (the reference). true: blocks race concurrently on atomic
  /// counters; invariants hold but per-bucket counts may depend on timing.
  bool concurrent = false;
  std::size_t threads = 1;
  RaceTrace* trace = nullptr;  // reference mode only
};

namespace detail {

// Block-local phase: every claim is decided against snapshot + local counts
// and only the local counter is incremented.
struct LocalBlock {
  std::vector<std::int64_t> local;
  std::vector<Claim> claims;  // per point of the block, local offsets
};

inline LocalBlock run_local_block(std::span<const std::size_t> points, std::span<const Voxel> voxels,
                                  std::span<const std::int64_t> snapshot, std::int64_t capacity,
                                  const HashConfig& cfg, const ProbeSchedule& probes, RaceTrace* trace) {
  const std::size_t recycle = cfg.num_buckets;
  LocalBlock blk;
  blk.local.assign(recycle + 1, 0);
  blk.claims.reserve(points.size());
  auto try_local = [&](std::size_t i, std::size_t h) -> std::optional<std::int64_t> {
    const auto seen = snapshot[h] + blk.local[h];
    if (seen >= capacity) {
      if (trace) trace->push_back({i, static_cast<std::int64_t>(h), seen, ProbeEvent::Outcome::Full});
      return std::nullopt;
    }
    if (trace) trace->push_back({i, static_cast<std::int64_t>(h), seen, ProbeEvent::Outcome::Claimed});
    return blk.local[h]++;
  };
  for (std::size_t i : points) {
    const auto& v = voxels[i];
    const std::size_t h = hash_bucket(v, cfg);
    if (auto off = try_local(i, h)) {
      blk.claims.push_back({static_cast<std::int64_t>(h), *off});
      continue;
    }
    std::optional<Claim> got;
    for (std::size_t p = 0; p < probes.probe_count() && !got; ++p) {
      const auto& d = probes.offsets[p];
      const Voxel pv{v[0] + d[0], v[1] + d[1], v[2] + d[2]};
      if (!in_hash_domain(pv, cfg)) {
        if (trace) trace->push_back({i, -1, 0, ProbeEvent::Outcome::OutOfDomain});
        continue;
      }
      const std::size_t hp = hash_bucket(pv, cfg);
      if (auto off = try_local(i, hp)) got = Claim{static_cast<std::int64_t>(hp), *off};
    }
    if (!got) {
      if (trace)
        trace->push_back({i, static_cast<std::int64_t>(recycle), snapshot[recycle] + blk.local[recycle],
                          ProbeEvent::Outcome::Recycled});
      got = Claim{static_cast<std::int64_t>(recycle), blk.local[recycle]++};
    }
    blk.claims.push_back(*got);
  }
  return blk;
}

// Bulk commit: add the block's counts, keep the slots that fit under S,
// roll the excess back and return the points that lost their slot.
template <typename Counters>
std::vector<std::size_t> commit_block(const LocalBlock& blk, Counters& global, std::int64_t capacity,
                                      std::span<const std::size_t> points, std::span<std::int64_t> rebase_out,
                                      std::span<std::int64_t> keep_out) {
  const std::size_t recycle = blk.local.size() - 1;
  for (std::size_t h = 0; h < blk.local.size(); ++h) {
    const auto n = blk.local[h];
    if (n == 0) continue;
    const auto prev = global.fetch_add(h, n);
    rebase_out[h] = prev;
    std::int64_t keep = n;
    if (h != recycle && prev + n > capacity) {
      keep = std::clamp<std::int64_t>(capacity - prev, 0, n);
      global.fetch_sub(h, n - keep);
    }
    keep_out[h] = keep;
  }
  std::vector<std::size_t> evicted;
  for (std::size_t j = 0; j < points.size(); ++j)
    if (blk.claims[j].offset >= keep_out[blk.claims[j].bucket]) evicted.push_back(j);
  return evicted;
}

}  // namespace detail

/// Two-stage counters: block-local counting, one bulk commit per block to
/// the global counters, and bucket_offset = local offset + rebase offset,
/// where the rebase offset is the global counter value before the commit.
inline BucketAssignment assign_buckets_two_stage(std::span<const Voxel> voxels, std::span<const std::int32_t> batch_id,
                                                 const HashConfig& cfg, std::int64_t capacity,
                                                 const ProbeSchedule& probes, const TwoStageOptions& opts = {}) {
  if (opts.block_size < 1) throw ConfigError("two-stage: block_size must be >= 1");
  auto plan = detail::plan_batches(voxels, batch_id, cfg, capacity, probes);
  auto a = detail::empty_assignment(voxels.size(), cfg, capacity, plan.num_batches);
  const std::size_t slots = cfg.num_buckets + 1;

  for (std::size_t b = 0; b < plan.members.size(); ++b) {
    const auto& members = plan.members[b];
    const auto slot0 = static_cast<std::int64_t>(b) * a.slots_per_batch();
    const std::size_t n_blocks = (members.size() + opts.block_size - 1) / opts.block_size;
    auto block_points = [&](std::size_t k) {
      const std::size_t lo = k * opts.block_size;
      return std::span<const std::size_t>(members).subspan(lo, std::min(opts.block_size, members.size() - lo));
    };

    if (!opts.concurrent) {
      SequentialCounters global(slots);
      std::vector<std::int64_t> snapshot(slots), rebase(slots), keep(slots);
      for (std::size_t k = 0; k < n_blocks; ++k) {
        const auto pts = block_points(k);
        for (std::size_t h = 0; h < slots; ++h) snapshot[h] = global.load(h);
        auto blk = detail::run_local_block(pts, voxels, snapshot, capacity, cfg, probes, opts.trace);
        auto evicted = detail::commit_block(blk, global, capacity, pts, rebase, keep);
        if (!evicted.empty()) throw IntegrityError("two-stage: exact snapshot produced an eviction");
        for (std::size_t j = 0; j < pts.size(); ++j) {
          a.bucket_id[pts[j]] = slot0 + blk.claims[j].bucket;
          a.bucket_offset[pts[j]] = blk.claims[j].offset + rebase[blk.claims[j].bucket];
        }
      }
      continue;
    }

    AtomicCounters global(slots);
    parallel_for(n_blocks, opts.threads, [&](std::size_t k) {
      const auto pts = block_points(k);
      std::vector<std::int64_t> snapshot(slots), rebase(slots), keep(slots);
      for (std::size_t h = 0; h < slots; ++h) snapshot[h] = global.load(h);
      auto blk = detail::run_local_block(pts, voxels, snapshot, capacity, cfg, probes, nullptr);
      auto evicted = detail::commit_block(blk, global, capacity, pts, rebase, keep);
      std::size_t e = 0;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        const std::size_t i = pts[j];
        if (e < evicted.size() && evicted[e] == j) {
          ++e;
          const auto c = claim_slot(i, voxels[i], global, capacity, cfg, probes);
          a.bucket_id[i] = slot0 + c.bucket;
          a.bucket_offset[i] = c.offset;
        } else {
          a.bucket_id[i] = slot0 + blk.claims[j].bucket;
          a.bucket_offset[i] = blk.claims[j].offset + rebase[blk.claims[j].bucket];
        }
      }
    });
  }
  detail::finish_assignment(a);
  return a;
}

template <typename T>
struct ScatterResult {
  Matrix<T> scattered;
  std::vector<std::int64_t> perm;  // perm[i] = destination row of source row i
};

/// scattered[dest(i)] = features[i]. Validates the assignment first.
template <typename T>
ScatterResult<T> scatter(const Matrix<T>& features, const BucketAssignment& a) {
  a.validate();
  if (features.rows() != a.size())
    throw IntegrityError("scatter: " + std::to_string(features.rows()) + " feature rows for " +
                         std::to_string(a.size()) + " points");
  ScatterResult<T> r{Matrix<T>(features.rows(), features.cols()), std::vector<std::int64_t>(a.size())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    r.perm[i] = a.dest(i);
    auto src = features.row(i);
    std::copy(src.begin(), src.end(), r.scattered.row(static_cast<std::size_t>(r.perm[i])).begin());
  }
  return r;
}

/// Scatters per-point values (coordinates, tags) with an assignment.
template <typename V>
std::vector<V> scatter_values(std::span<const V> values, const BucketAssignment& a) {
  a.validate();
  if (values.size() != a.size()) throw IntegrityError("scatter: value count differs from point count");
  std::vector<V> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[static_cast<std::size_t>(a.dest(i))] = values[i];
  return out;
}

/// Inverse of scatter: out[i] = scattered[perm[i]].
template <typename T>
Matrix<T> unscatter(const Matrix<T>& scattered, std::span<const std::int64_t> perm) {
  Matrix<T> out(scattered.rows(), scattered.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto src = scattered.row(static_cast<std::size_t>(perm[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace psh3d
