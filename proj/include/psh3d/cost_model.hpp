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

// Analytical data-movement model contrasting a global sort + shuffle per
// round ("ptv3") with one up-front bucketing pass and logical shuffles
// ("flash3d"). Modeled seconds, not measurements.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psh3d/error.hpp"

namespace psh3d {

enum class Precision { Half, Single };

inline constexpr double bytes_per_float(Precision p) { return p == Precision::Half ? 2.0 : 4.0; }

struct MachineModel {
  double dram_to_l1_rate = 1e12;      // floats/s
  double random_shuffle_rate = 1e11;  // floats/s, uncoalesced global scatter
  double flop_rate = 6e13;            // FLOP/s
  double attn_flop_rate = 5e14;       // FLOP/s inside fused attention
  double sort_constant = 1.0;         // key ops per n*log2(n)
  double psh_ops_per_point = 10.0;    // hash + voxelize + counter claim
  double scope_points = 4096;         // attention scope size in points
  Precision precision = Precision::Half;

  void validate() const {
    for (double r : {dram_to_l1_rate, random_shuffle_rate, flop_rate, attn_flop_rate, sort_constant,
                     psh_ops_per_point, scope_points})
      if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("machine model: rates and constants must be positive");
  }

  /// Sets a field by its flag name (e.g. "dram_to_l1_rate").
  void set(std::string_view key, double value) {
    if (key == "dram_to_l1_rate") dram_to_l1_rate = value;
    else if (key == "random_shuffle_rate") random_shuffle_rate = value;
    else if (key == "flop_rate") flop_rate = value;
    else if (key == "attn_flop_rate") attn_flop_rate = value;
    else if (key == "sort_constant") sort_constant = value;
    else if (key == "psh_ops_per_point") psh_ops_per_point = value;
    else if (key == "scope_points") scope_points = value;
    else throw ConfigError("machine model: unknown rate '" + std::string(key) + "'");
  }
};

enum class Pipeline { Ptv3, Flash3d };

inline std::string_view to_string(Pipeline p) { return p == Pipeline::Ptv3 ? "ptv3" : "flash3d"; }

struct PhaseCost {
  double seconds = 0.0;
  double bytes = 0.0;
};

struct CostReport {
  Pipeline pipeline = Pipeline::Ptv3;
  double n = 0;
  double d = 0;
  std::size_t rounds = 0;
  PhaseCost load, shuffle, attention, writeback;
  // Reordering work inside the shuffle phase: per-round sort + scatter for
  // ptv3, bucketing alone for flash3d.
  double ordering_seconds = 0.0;
  MachineModel machine;

  double total_seconds() const { return load.seconds + shuffle.seconds + attention.seconds + writeback.seconds; }
  double total_bytes() const { return load.bytes + shuffle.bytes + attention.bytes + writeback.bytes; }
};

namespace detail {

inline void require_points(double n) {
  if (!(n >= 1.0)) throw ConfigError("cost model: n must be >= 1");
}

// Per round: Q, K, V tile loads plus the output write, and 4*n*W*d FLOPs.
inline PhaseCost attention_round(double n, double d, const MachineModel& mm) {
  const double floats = 4.0 * n * d;
  const double w = std::min(mm.scope_points, n);
  return {floats / mm.dram_to_l1_rate + 4.0 * n * w * d / mm.attn_flop_rate,
          floats * bytes_per_float(mm.precision)};
}

inline CostReport base_report(Pipeline p, double n, double d, std::size_t rounds, const MachineModel& mm) {
  mm.validate();
  require_points(n);
  if (!(d >= 1.0)) throw ConfigError("cost model: d must be >= 1");
  CostReport r;
  r.pipeline = p;
  r.n = n;
  r.d = d;
  r.rounds = rounds;
  r.machine = mm;
  const double bpf = bytes_per_float(mm.precision);
  r.load = {n * d / mm.dram_to_l1_rate, n * d * bpf};
  r.writeback = {n * d / mm.dram_to_l1_rate, n * d * bpf};
  const auto per_round = attention_round(n, d, mm);
  r.attention = {per_round.seconds * static_cast<double>(rounds), per_round.bytes * static_cast<double>(rounds)};
  return r;
}

}  // namespace detail

/// Each round sorts c*n*log2(n) keys at flop_rate and scatters n*d floats
/// at the random-shuffle rate before attention.
inline CostReport model_ptv3(double n, double d, std::size_t rounds, const MachineModel& mm = {}) {
  auto r = detail::base_report(Pipeline::Ptv3, n, d, rounds, mm);
  const double sort = mm.sort_constant * n * std::log2(std::max(n, 2.0)) / mm.flop_rate;
  const double scatter = n * d / mm.random_shuffle_rate;
  const auto rd = static_cast<double>(rounds);
  r.shuffle = {rd * (sort + scatter), rd * n * d * bytes_per_float(mm.precision)};
  r.ordering_seconds = r.shuffle.seconds;
  return r;
}

/// One coalesced scatter of n*d floats at dram_to_l1_rate plus O(n + K)
/// bucketing work, charged once; rounds only add attention.
inline CostReport model_flash3d(double n, double d, std::size_t rounds, std::int64_t num_buckets,
                                std::int64_t capacity, const MachineModel& mm = {}) {
  if (num_buckets < 1 || capacity < 1) throw ConfigError("cost model: K and S must be >= 1");
  auto r = detail::base_report(Pipeline::Flash3d, n, d, rounds, mm);
  const double psh = (mm.psh_ops_per_point * n + static_cast<double>(num_buckets)) / mm.flop_rate;
  const double scatter = n * d / mm.dram_to_l1_rate;
  r.shuffle = {psh + scatter, n * d * bytes_per_float(mm.precision)};
  r.ordering_seconds = psh;
  return r;
}

/// ptv3 reordering time over flash3d bucketing time at the same n.
inline double serialization_psh_ratio(const CostReport& ptv3, const CostReport& flash3d) {
  return ptv3.ordering_seconds / flash3d.ordering_seconds;
}

struct SweepConfig {
  double d = 64;
  std::size_t rounds = 4;
  std::int64_t num_buckets = 256;
  std::int64_t capacity = 512;
};

inline constexpr std::string_view kSweepHeader =
    "pipeline,n,d,rounds,load_s,shuffle_s,attention_s,writeback_s,total_s,bytes_moved,serialization_psh_ratio";

/// One CSV row per (size, pipeline), sizes in order, ptv3 before flash3d.
inline std::string sweep_report(std::span<const double> sizes, std::span<const Pipeline> pipelines,
                                const SweepConfig& cfg = {}, const MachineModel& mm = {}) {
  if (sizes.empty()) throw ConfigError("cost sweep: sizes must be non-empty");
  if (pipelines.empty()) throw ConfigError("cost sweep: no pipelines selected");
  std::string out(kSweepHeader);
  out.push_back('\n');
  char buf[512];
  for (double n : sizes) {
    const auto p = model_ptv3(n, cfg.d, cfg.rounds, mm);
    const auto f = model_flash3d(n, cfg.d, cfg.rounds, cfg.num_buckets, cfg.capacity, mm);
    const double ratio = serialization_psh_ratio(p, f);
    for (auto which : pipelines) {
      const auto& r = which == Pipeline::Ptv3 ? p : f;
      std::snprintf(buf, sizeof buf, "%s,%.0f,%.0f,%zu,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e\n",
                    std::string(to_string(which)).c_str(), r.n, r.d, r.rounds, r.load.seconds, r.shuffle.seconds,
                    r.attention.seconds, r.writeback.seconds, r.total_seconds(), r.total_bytes(), ratio);
      out += buf;
    }
  }
  return out;
}

}  // namespace psh3d
