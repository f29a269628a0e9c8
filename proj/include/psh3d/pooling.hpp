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

// In-bucket pooling with a fixed reduction factor rho. Each bucket is cut
// into tiles of at most 1024 rows; inside a tile, points are grouped into
// ceil(m / rho) sub-buckets and each sub-bucket's features are reduced.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/geometry.hpp"
#include "psh3d/hashing.hpp"
#include "psh3d/matrix.hpp"
#include "psh3d/parallel.hpp"
#include "psh3d/psh.hpp"

namespace psh3d {

inline constexpr std::size_t kMaxTileRows = 1024;

struct SubBucketAssignment {
  std::vector<std::int32_t> subbucket_id;  // per point, in allocation order
  std::size_t num_subbuckets = 0;          // ceil(m / rho)
  std::size_t rho = 1;
  std::size_t passes = 0;                  // nearest-sub-bucket passes used

  std::size_t size() const noexcept { return subbucket_id.size(); }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(num_subbuckets, 0);
    for (auto id : subbucket_id) ++s[static_cast<std::size_t>(id)];
    return s;
  }

  void validate() const {
    if (rho < 1) throw IntegrityError("sub-buckets: rho must be >= 1");
    if (num_subbuckets != (size() + rho - 1) / rho) throw IntegrityError("sub-buckets: count is not ceil(m/rho)");
    for (auto id : subbucket_id)
      if (id < 0 || static_cast<std::size_t>(id) >= num_subbuckets) throw IntegrityError("sub-buckets: bad id");
    std::size_t short_ones = 0;
    for (auto s : sizes()) {
      if (s == 0) throw IntegrityError("sub-buckets: empty sub-bucket");
      if (s > rho) throw IntegrityError("sub-buckets: sub-bucket exceeds rho");
      if (s < rho) ++short_ones;
    }
    if (short_ones > 1) throw IntegrityError("sub-buckets: more than one sub-bucket below rho");
  }
};

/// Three-step sub-bucket construction for one tile.
///  1. Hash points (zorder-mod on a tile-local grid, K = T = ceil(m/rho))
///     and give each distinct hash a sub-bucket id from a tile counter.
///     Points past a sub-bucket's capacity overflow.
///  2. While fewer than T ids exist, each overflow point (index order)
///     seeds a fresh sub-bucket.
///  3. Remaining points join the nearest under-filled sub-bucket by L2
///     distance to its seed (first point placed; ties -> lowest id). A pass
///     chooses from a snapshot of the under-filled set, so several points
///     may race for the last slot; losers retry in the next pass.
/// Capacity is rho for every id except T-1, which holds m - (T-1)*rho.
inline SubBucketAssignment build_subbuckets(std::span<const Vec3> coords, std::size_t rho) {
  const std::size_t m = coords.size();
  if (m < 1 || m > kMaxTileRows) throw ConfigError("sub-buckets: tile must hold 1..1024 points");
  if (rho < 1) throw ConfigError("sub-buckets: rho must be >= 1");
  const std::size_t target = (m + rho - 1) / rho;
  auto cap = [&](std::size_t id) { return id + 1 == target ? m - (target - 1) * rho : rho; };

  Vec3 lo = coords[0], hi = coords[0];
  for (const auto& c : coords)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], c[a]);
      hi[a] = std::max(hi[a], c[a]);
    }
  const auto g = static_cast<std::int64_t>(std::ceil(std::cbrt(static_cast<double>(target)) - 1e-9));
  HashConfig cfg{HashKind::ZorderMod, static_cast<std::uint32_t>(target), 1, 4};
  auto local_voxel = [&](const Vec3& c) {
    Voxel v{};
    for (int a = 0; a < 3; ++a) {
      const double ext = hi[a] - lo[a];
      const auto cell = ext > 0 ? static_cast<std::int64_t>((c[a] - lo[a]) / ext * static_cast<double>(g)) : 0;
      v[a] = std::clamp<std::int64_t>(cell, 0, std::max<std::int64_t>(g - 1, 0));
    }
    return v;
  };

  SubBucketAssignment sub;
  sub.rho = rho;
  sub.num_subbuckets = target;
  sub.subbucket_id.assign(m, -1);
  std::vector<std::size_t> count;
  std::vector<std::size_t> seed;  // point index of each sub-bucket's first member
  auto place = [&](std::size_t i, std::size_t id) {
    if (count[id]++ == 0) seed[id] = i;
    sub.subbucket_id[i] = static_cast<std::int32_t>(id);
  };

  // Step 1.
  std::vector<std::int64_t> id_of_hash(target, -1);
  std::vector<std::size_t> overflow;
  std::size_t next_id = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto h = hash_bucket(local_voxel(coords[i]), cfg);
    if (id_of_hash[h] < 0) {
      id_of_hash[h] = static_cast<std::int64_t>(next_id++);
      count.push_back(0);
      seed.push_back(i);
    }
    const auto id = static_cast<std::size_t>(id_of_hash[h]);
    if (count[id] < cap(id))
      place(i, id);
    else
      overflow.push_back(i);
  }

  // Step 2.
  std::vector<std::size_t> remaining;
  for (std::size_t i : overflow) {
    if (next_id < target) {
      count.push_back(0);
      seed.push_back(i);
      place(i, next_id++);
    } else {
      remaining.push_back(i);
    }
  }

  // Step 3.
  auto dist2 = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (int a = 0; a < 3; ++a) s += (coords[i][a] - coords[j][a]) * (coords[i][a] - coords[j][a]);
    return s;
  };
  std::vector<std::size_t> open;
  while (!remaining.empty()) {
    ++sub.passes;
    open.clear();
    for (std::size_t id = 0; id < next_id; ++id)
      if (count[id] < cap(id)) open.push_back(id);
    if (open.empty()) throw IntegrityError("sub-buckets: no capacity left for remaining points");
    std::vector<std::size_t> retry;
    for (std::size_t i : remaining) {
      std::size_t best = open.front();
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t id : open) {
        const double dd = dist2(i, seed[id]);
        if (dd < best_d) {
          best_d = dd;
          best = id;
        }
      }
      if (count[best] < cap(best))
        place(i, best);
      else
        retry.push_back(i);
    }
    remaining.swap(retry);
  }
  return sub;
}

enum class Reduce { Sum, Mean, Min, Max };

inline std::string_view to_string(Reduce r) {
  switch (r) {
    case Reduce::Sum: return "sum";
    case Reduce::Mean: return "mean";
    case Reduce::Min: return "min";
    case Reduce::Max: return "max";
  }
  return "?";
}

inline Reduce parse_reduce(std::string_view s) {
  for (auto r : {Reduce::Sum, Reduce::Mean, Reduce::Min, Reduce::Max})
    if (s == to_string(r)) return r;
  throw ConfigError("unknown reduction '" + std::string(s) + "'");
}

/// Row j of the result reduces the features of sub-bucket j.
template <typename T>
Matrix<T> pool_features(const Matrix<T>& features, const SubBucketAssignment& sub, Reduce reduce) {
  if (features.rows() != sub.size()) throw IntegrityError("pool: feature rows differ from sub-bucket assignment");
  const std::size_t d = features.cols();
  Matrix<T> out(sub.num_subbuckets, d);
  std::vector<std::size_t> n(sub.num_subbuckets, 0);
  for (std::size_t i = 0; i < sub.size(); ++i) {
    const auto j = static_cast<std::size_t>(sub.subbucket_id[i]);
    auto src = features.row(i);
    auto dst = out.row(j);
    if (n[j]++ == 0) {
      std::copy(src.begin(), src.end(), dst.begin());
      continue;
    }
    for (std::size_t c = 0; c < d; ++c) {
      switch (reduce) {
        case Reduce::Sum:
        case Reduce::Mean: dst[c] += src[c]; break;
        case Reduce::Min: dst[c] = std::min(dst[c], src[c]); break;
        case Reduce::Max: dst[c] = std::max(dst[c], src[c]); break;
      }
    }
  }
  for (std::size_t j = 0; j < n.size(); ++j) {
    if (n[j] == 0) throw IntegrityError("pool: sub-bucket " + std::to_string(j) + " is empty");
    if (reduce == Reduce::Mean)
      for (auto& x : out.row(j)) x /= static_cast<T>(n[j]);
  }
  return out;
}

/// Tile height used by pool_stage: the largest multiple of rho <= 1024.
inline std::size_t pool_tile_rows(std::size_t rho) {
  if (rho < 1 || rho > kMaxTileRows) throw ConfigError("pool: rho must be in [1, 1024]");
  return kMaxTileRows / rho * rho;
}

struct PoolResult {
  MatrixD features;
  std::vector<Vec3> coords;       // centroid of each sub-bucket
  BucketAssignment assignment;    // same buckets, counts ceil(count / rho)
  std::vector<std::size_t> subbucket_sizes;  // histogram: index = size, value = occurrences
  std::vector<std::size_t> parent;           // pooled row of every input row
  std::vector<IndexRange> tile_rows;         // input rows of every tile
  std::size_t tiles = 0;
  std::size_t max_passes = 0;
};

/// Pools every bucket tile independently. Input rows are in scattered
/// order; the output is again scattered, with identity destinations.
inline PoolResult pool_stage(const MatrixD& features, std::span<const Vec3> coords, const BucketAssignment& a,
                             std::size_t rho, Reduce reduce, std::size_t threads = 1) {
  a.validate();
  if (features.rows() != a.size() || coords.size() != a.size())
    throw ConfigError("pool: features/coords do not match the assignment");
  const std::size_t tile = pool_tile_rows(rho);
  const std::size_t slots = static_cast<std::size_t>(a.num_slots());

  struct Job {
    std::size_t slot, begin, rows, out_begin;
  };
  std::vector<Job> jobs;
  PoolResult res;
  res.assignment.num_buckets = a.num_buckets;
  res.assignment.num_batches = a.num_batches;
  res.assignment.capacity = static_cast<std::int64_t>((static_cast<std::size_t>(a.capacity) + rho - 1) / rho);
  res.assignment.counts.assign(slots, 0);
  std::size_t out_rows = 0;
  for (std::size_t s = 0; s < slots; ++s) {
    const auto lo = static_cast<std::size_t>(a.bucket_base[s]);
    const auto hi = lo + static_cast<std::size_t>(a.counts[s]);
    for (std::size_t b = lo; b < hi; b += tile) {
      const std::size_t rows = std::min(tile, hi - b);
      jobs.push_back({s, b, rows, out_rows});
      const std::size_t pooled = (rows + rho - 1) / rho;
      out_rows += pooled;
      res.assignment.counts[s] += static_cast<std::int64_t>(pooled);
    }
  }
  res.assignment.bucket_base = compute_bucket_base(res.assignment.counts);
  res.assignment.bucket_id.resize(out_rows);
  res.assignment.bucket_offset.resize(out_rows);
  res.features = MatrixD(out_rows, features.cols());
  res.coords.resize(out_rows);
  res.parent.resize(features.rows());
  res.tiles = jobs.size();
  for (const auto& job : jobs) res.tile_rows.push_back({job.begin, job.begin + job.rows});

  std::vector<std::vector<std::size_t>> job_sizes(jobs.size());
  std::vector<std::size_t> job_passes(jobs.size(), 0);
  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    const auto tile_coords = coords.subspan(job.begin, job.rows);
    const auto sub = build_subbuckets(tile_coords, rho);
    sub.validate();
    job_passes[j] = sub.passes;
    job_sizes[j] = sub.sizes();
    const auto pooled = pool_features(gather_rows(features, std::vector<IndexRange>{{job.begin, job.begin + job.rows}}),
                                      sub, reduce);
    std::vector<Vec3> centroid(sub.num_subbuckets, Vec3{0, 0, 0});
    for (std::size_t i = 0; i < job.rows; ++i) {
      res.parent[job.begin + i] = job.out_begin + static_cast<std::size_t>(sub.subbucket_id[i]);
      for (int ax = 0; ax < 3; ++ax) centroid[sub.subbucket_id[i]][ax] += tile_coords[i][ax];
    }
    const auto base = static_cast<std::size_t>(res.assignment.bucket_base[job.slot]);
    for (std::size_t r = 0; r < sub.num_subbuckets; ++r) {
      const std::size_t dst = job.out_begin + r;
      std::copy(pooled.row(r).begin(), pooled.row(r).end(), res.features.row(dst).begin());
      for (int ax = 0; ax < 3; ++ax) res.coords[dst][ax] = centroid[r][ax] / static_cast<double>(job_sizes[j][r]);
      res.assignment.bucket_id[dst] = static_cast<std::int64_t>(job.slot);
      res.assignment.bucket_offset[dst] = static_cast<std::int64_t>(dst - base);
    }
  });
  res.subbucket_sizes.assign(rho + 1, 0);
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    res.max_passes = std::max(res.max_passes, job_passes[j]);
    for (auto s : job_sizes[j]) ++res.subbucket_sizes[s];
  }
  res.assignment.validate();
  return res;
}

}  // namespace psh3d
