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

// Bucket hash functions over non-negative voxel coordinates.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/geometry.hpp"

namespace psh3d {

enum class HashKind { XorMod, XorDiv, ZorderMod, ZorderDiv };

inline std::string_view to_string(HashKind k) {
  switch (k) {
    case HashKind::XorMod: return "xor-mod";
    case HashKind::XorDiv: return "xor-div";
    case HashKind::ZorderMod: return "zorder-mod";
    case HashKind::ZorderDiv: return "zorder-div";
  }
  return "?";
}

inline HashKind parse_hash_kind(std::string_view s) {
  for (auto k : {HashKind::XorMod, HashKind::XorDiv, HashKind::ZorderMod, HashKind::ZorderDiv})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown hash '" + std::string(s) + "'");
}

inline constexpr bool is_zorder(HashKind k) { return k == HashKind::ZorderMod || k == HashKind::ZorderDiv; }
inline constexpr bool is_div(HashKind k) { return k == HashKind::XorDiv || k == HashKind::ZorderDiv; }

struct HashConfig {
  HashKind kind = HashKind::ZorderDiv;
  std::uint32_t num_buckets = 256;  // K
  std::uint64_t divisor = 1;        // S_div, div variants only
  unsigned bits_per_axis = 10;
  // Div variants: reject quotients >= K instead of reducing them mod K.
  bool strict_div = false;

  void validate() const {
    if (num_buckets < 1) throw ConfigError("hash: K must be >= 1");
    if (divisor < 1) throw ConfigError("hash: S_div must be >= 1");
    if (bits_per_axis < 1 || bits_per_axis > 21) throw ConfigError("hash: bits_per_axis must be in [1, 21]");
  }
};

namespace detail {

// Spreads the low 21 bits of x so bit k lands at bit 3k.
constexpr std::uint64_t spread_bits3(std::uint64_t x) {
  x &= 0x1fffffULL;
  x = (x | x << 32) & 0x1f00000000ffffULL;
  x = (x | x << 16) & 0x1f0000ff0000ffULL;
  x = (x | x << 8) & 0x100f00f00f00f00fULL;
  x = (x | x << 4) & 0x10c30c30c30c30c3ULL;
  x = (x | x << 2) & 0x1249249249249249ULL;
  return x;
}

inline void require_non_negative(const Voxel& v) {
  for (int a = 0; a < 3; ++a)
    if (v[a] < 0)
      throw RangeError(std::string("hash: axis ") + static_cast<char>('x' + a) + " value " + std::to_string(v[a]) +
                       " is negative; remap voxels first");
}

}  // namespace detail

/// Z-order code: bit k of x, y, z goes to bits 3k, 3k+1, 3k+2.
inline std::uint64_t morton_encode(const Voxel& v, unsigned bits_per_axis) {
  if (bits_per_axis < 1 || bits_per_axis > 21) throw ConfigError("morton: bits_per_axis must be in [1, 21]");
  const std::int64_t limit = std::int64_t{1} << bits_per_axis;
  for (int a = 0; a < 3; ++a)
    if (v[a] < 0 || v[a] >= limit)
      throw RangeError(std::string("morton: axis ") + static_cast<char>('x' + a) + " value " + std::to_string(v[a]) +
                       " outside [0, " + std::to_string(limit) + ")");
  return detail::spread_bits3(static_cast<std::uint64_t>(v[0])) |
         detail::spread_bits3(static_cast<std::uint64_t>(v[1])) << 1 |
         detail::spread_bits3(static_cast<std::uint64_t>(v[2])) << 2;
}

/// Pre-division key: XOR of the components, or the Morton code.
inline std::uint64_t hash_key(const Voxel& v, const HashConfig& cfg) {
  if (is_zorder(cfg.kind)) return morton_encode(v, cfg.bits_per_axis);
  detail::require_non_negative(v);
  return static_cast<std::uint64_t>(v[0]) ^ static_cast<std::uint64_t>(v[1]) ^ static_cast<std::uint64_t>(v[2]);
}

/// True when hash_bucket(v, cfg) is defined, i.e. it will not throw.
inline bool in_hash_domain(const Voxel& v, const HashConfig& cfg) {
  const std::int64_t limit = is_zorder(cfg.kind) ? std::int64_t{1} << cfg.bits_per_axis
                                                 : std::numeric_limits<std::int64_t>::max();
  for (auto c : v)
    if (c < 0 || c >= limit) return false;
  return true;
}

inline std::uint32_t hash_bucket(const Voxel& v, const HashConfig& cfg) {
  const std::uint64_t key = hash_key(v, cfg);
  const std::uint64_t k = cfg.num_buckets;
  if (!is_div(cfg.kind)) return static_cast<std::uint32_t>(key % k);
  const std::uint64_t q = key / cfg.divisor;
  if (cfg.strict_div && q >= k)
    throw RangeError("hash: quotient " + std::to_string(q) + " exceeds K-1 = " + std::to_string(k - 1));
  return static_cast<std::uint32_t>(q % k);
}

/// Offsets every voxel by its batch's componentwise minimum so all
/// components are non-negative. batch_id must be contiguous from 0.
inline std::vector<Voxel> remap_per_batch(std::span<const Voxel> voxels, std::span<const std::int32_t> batch_id) {
  if (voxels.size() != batch_id.size()) throw IntegrityError("remap: voxel/batch size mismatch");
  std::vector<Voxel> lo;
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const auto b = static_cast<std::size_t>(batch_id[i]);
    if (b >= lo.size()) lo.resize(b + 1, Voxel{std::numeric_limits<std::int64_t>::max(),
                                               std::numeric_limits<std::int64_t>::max(),
                                               std::numeric_limits<std::int64_t>::max()});
    for (int a = 0; a < 3; ++a) lo[b][a] = std::min(lo[b][a], voxels[i][a]);
  }
  std::vector<Voxel> out(voxels.size());
  for (std::size_t i = 0; i < voxels.size(); ++i)
    for (int a = 0; a < 3; ++a) out[i][a] = voxels[i][a] - lo[batch_id[i]][a];
  return out;
}

/// Smallest divisor mapping every key of `voxels` into [0, K):
/// ceil((max key + 1) / K), at least 1.
inline std::uint64_t auto_divisor(std::span<const Voxel> voxels, const HashConfig& cfg) {
  std::uint64_t hi = 0;
  for (const auto& v : voxels) hi = std::max(hi, hash_key(v, cfg));
  const std::uint64_t k = cfg.num_buckets;
  return std::max<std::uint64_t>(1, hi / k + 1);
}

}  // namespace psh3d
