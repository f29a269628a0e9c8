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

// Multi-head self-attention over a scope, two ways:
//   reference_attention  materialises the full score matrix (the oracle);
//   tiled_attention      streams key/value tiles with an online softmax and
//                        reads rows through the scope's index ranges.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/geometry.hpp"
#include "psh3d/matrix.hpp"

namespace psh3d {

inline constexpr std::size_t kTileAlign = 16;

struct AttentionParams {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t tile_rows = 64;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }

  void validate() const {
    if (d_model == 0 || n_heads == 0) throw ConfigError("attention: d_model and n_heads must be >= 1");
    if (d_model % n_heads) throw ConfigError("attention: d_model must be divisible by n_heads");
    if (tile_rows == 0 || tile_rows % kTileAlign) throw ConfigError("attention: tile_rows must be a multiple of 16");
  }
};

/// Feature bytes copied into attention tiles. Gathering scopes never
/// touches it.
namespace instrumentation {
inline std::atomic<std::uint64_t> tile_bytes_loaded{0};
inline std::uint64_t feature_bytes_moved() { return tile_bytes_loaded.load(std::memory_order_relaxed); }
inline void reset_feature_bytes() { tile_bytes_loaded.store(0, std::memory_order_relaxed); }
}  // namespace instrumentation

namespace detail {

template <typename T>
void require_finite(const Matrix<T>& m, const char* what) {
  for (auto x : m.values())
    if (!std::isfinite(x)) throw NumericError(std::string("attention: non-finite value in ") + what);
}

template <typename T>
void require_same_shape(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const AttentionParams& p) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() || q.cols() != v.cols())
    throw ConfigError("attention: Q, K, V shapes differ");
  if (q.cols() != p.d_model)
    throw ConfigError("attention: feature width " + std::to_string(q.cols()) + " != d_model " +
                      std::to_string(p.d_model));
}

}  // namespace detail

/// softmax(scale * Q_h K_h^T) V_h per head with the full m x m score matrix
/// and max-subtracted softmax; heads are concatenated.
template <typename T>
Matrix<T> reference_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                              const AttentionParams& params) {
  params.validate();
  detail::require_same_shape(q, k, v, params);
  if (q.rows() == 0) throw ConfigError("attention: scope must have at least one row");
  detail::require_finite(q, "Q");
  detail::require_finite(k, "K");
  detail::require_finite(v, "V");
  const std::size_t m = q.rows(), hd = params.head_dim();
  const T scale = static_cast<T>(params.scale());
  Matrix<T> out(m, params.d_model);
  Matrix<T> scores(m, m);
  for (std::size_t h = 0; h < params.n_heads; ++h) {
    const std::size_t c0 = h * hd;
    for (std::size_t i = 0; i < m; ++i) {
      auto qi = q.row(i);
      auto si = scores.row(i);
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        auto kj = k.row(j);
        T s = 0;
        for (std::size_t c = c0; c < c0 + hd; ++c) s += qi[c] * kj[c];
        si[j] = s * scale;
        mx = std::max(mx, si[j]);
      }
      T denom = 0;
      for (auto& s : si) {
        s = std::exp(s - mx);
        denom += s;
      }
      auto oi = out.row(i);
      for (std::size_t j = 0; j < m; ++j) {
        const T w = si[j] / denom;
        auto vj = v.row(j);
        for (std::size_t c = c0; c < c0 + hd; ++c) oi[c] += w * vj[c];
      }
    }
  }
  return out;
}

struct TileStats {
  std::size_t query_tiles = 0;
  std::size_t key_tiles = 0;
  std::size_t padded_rows = 0;         // mask rows added to reach 16-row alignment
  std::size_t all_masked_queries = 0;  // real queries with no unmasked key: output zero
};

namespace detail {

// A tile: up to tile_rows rows from one range, rounded up to a multiple of
// 16 with masked rows.
struct TileSpec {
  std::size_t begin;  // first source row
  std::size_t rows;   // real rows
  std::size_t padded; // rows including alignment padding
};

inline std::vector<TileSpec> plan_tiles(std::span<const IndexRange> ranges, std::size_t tile_rows) {
  std::vector<TileSpec> tiles;
  for (const auto& r : ranges)
    for (std::size_t b = r.begin; b < r.end; b += tile_rows) {
      const std::size_t rows = std::min(tile_rows, r.end - b);
      tiles.push_back({b, rows, (rows + kTileAlign - 1) / kTileAlign * kTileAlign});
    }
  return tiles;
}

template <typename T>
struct TileBuffer {
  std::vector<T> data;                 // padded x d_model, row-major
  std::vector<unsigned char> valid;    // per padded row
  std::vector<std::size_t> source;     // per real row

  void load(const Matrix<T>& m, const TileSpec& t, std::span<const unsigned char> row_mask) {
    const std::size_t d = m.cols();
    data.assign(t.padded * d, T{0});
    valid.assign(t.padded, 0);
    source.resize(t.rows);
    for (std::size_t r = 0; r < t.rows; ++r) {
      const std::size_t src = t.begin + r;
      source[r] = src;
      valid[r] = row_mask.empty() ? 1 : row_mask[src];
      auto row = m.row(src);
      std::copy(row.begin(), row.end(), data.begin() + r * d);
    }
    instrumentation::tile_bytes_loaded.fetch_add(t.rows * d * sizeof(T), std::memory_order_relaxed);
  }
};

}  // namespace detail

/// Online-softmax attention over the rows named by `ranges`, writing each
/// query's output to the same row index of `out` (fixed layout). Keys and
/// values stream in tiles of tile_rows; per query and head it keeps a
/// running max, a running denominator and a rescaled accumulator, so no
/// score matrix larger than one tile pair exists. `row_mask`, when given,
/// is indexed by source row; masked rows are excluded as keys and their
/// own outputs are zero.
template <typename T>
void tiled_attention_into(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                          std::span<const IndexRange> ranges, const AttentionParams& params, Matrix<T>& out,
                          TileStats* stats = nullptr, std::span<const unsigned char> row_mask = {}) {
  params.validate();
  detail::require_same_shape(q, k, v, params);
  if (out.rows() != q.rows() || out.cols() != q.cols()) throw ConfigError("attention: output shape mismatch");
  if (!row_mask.empty() && row_mask.size() != q.rows()) throw ConfigError("attention: row mask size mismatch");
  for (const auto& r : ranges)
    if (r.end > q.rows() || r.begin > r.end) throw IntegrityError("attention: range outside the feature array");

  const std::size_t d = params.d_model, hd = params.head_dim(), heads = params.n_heads;
  const T scale = static_cast<T>(params.scale());
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const auto tiles = detail::plan_tiles(ranges, params.tile_rows);

  detail::TileBuffer<T> qt, kt, vt;
  std::vector<T> run_max, run_den, acc, scores(params.tile_rows);
  TileStats local;
  for (const auto& qs : tiles) {
    qt.load(q, qs, row_mask);
    ++local.query_tiles;
    local.padded_rows += qs.padded - qs.rows;
    run_max.assign(qs.padded * heads, neg_inf);
    run_den.assign(qs.padded * heads, T{0});
    acc.assign(qs.padded * d, T{0});
    for (const auto& ks : tiles) {
      kt.load(k, ks, row_mask);
      vt.load(v, ks, row_mask);
      ++local.key_tiles;
      for (std::size_t r = 0; r < qs.rows; ++r) {
        if (!qt.valid[r]) continue;
        const T* qrow = qt.data.data() + r * d;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * hd;
          T tile_max = neg_inf;
          for (std::size_t c = 0; c < ks.padded; ++c) {
            if (!kt.valid[c]) {
              scores[c] = neg_inf;
              continue;
            }
            const T* krow = kt.data.data() + c * d + c0;
            T s = 0;
            for (std::size_t x = 0; x < hd; ++x) s += qrow[c0 + x] * krow[x];
            scores[c] = s * scale;
            tile_max = std::max(tile_max, scores[c]);
          }
          if (tile_max == neg_inf) continue;  // whole key tile masked
          T& m_run = run_max[r * heads + h];
          T& l_run = run_den[r * heads + h];
          T* a = acc.data() + r * d + c0;
          const T m_new = std::max(m_run, tile_max);
          const T corr = m_run == neg_inf ? T{0} : std::exp(m_run - m_new);
          l_run *= corr;
          for (std::size_t x = 0; x < hd; ++x) a[x] *= corr;
          for (std::size_t c = 0; c < ks.padded; ++c) {
            if (!kt.valid[c]) continue;
            const T p = std::exp(scores[c] - m_new);
            l_run += p;
            const T* vrow = vt.data.data() + c * d + c0;
            for (std::size_t x = 0; x < hd; ++x) a[x] += p * vrow[x];
          }
          m_run = m_new;
        }
      }
    }
    for (std::size_t r = 0; r < qs.rows; ++r) {
      auto o = out.row(qt.source[r]);
      if (!qt.valid[r]) {
        std::fill(o.begin(), o.end(), T{0});
        continue;
      }
      bool empty_support = false;
      for (std::size_t h = 0; h < heads; ++h) {
        const T l = run_den[r * heads + h];
        const std::size_t c0 = h * hd;
        if (l == T{0}) {
          empty_support = true;
          for (std::size_t x = 0; x < hd; ++x) o[c0 + x] = T{0};
          continue;
        }
        for (std::size_t x = 0; x < hd; ++x) o[c0 + x] = acc[r * d + c0 + x] / l;
      }
      if (empty_support) ++local.all_masked_queries;
    }
  }
  if (stats) {
    stats->query_tiles += local.query_tiles;
    stats->key_tiles += local.key_tiles;
    stats->padded_rows += local.padded_rows;
    stats->all_masked_queries += local.all_masked_queries;
  }
}

/// Compact form: returns the scope's outputs in concatenated range order.
template <typename T>
Matrix<T> tiled_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                          std::span<const IndexRange> ranges, const AttentionParams& params,
                          TileStats* stats = nullptr, std::span<const unsigned char> row_mask = {}) {
  Matrix<T> full(q.rows(), q.cols());
  tiled_attention_into(q, k, v, ranges, params, full, stats, row_mask);
  return gather_rows(full, ranges);
}

/// Sinusoidal encoding: d_model/3 channels per axis, alternating sin/cos
/// over F = d_model/6 frequencies omega_k = pi * 2^(9k/(F-1)). Expects
/// coordinates normalised to roughly [0, 1].
inline MatrixD positional_encoding(std::span<const Vec3> coords, std::size_t d_model) {
  if (d_model == 0 || d_model % 6) throw ConfigError("positional encoding: d_model must be a positive multiple of 6");
  const std::size_t per_axis = d_model / 3, freqs = d_model / 6;
  std::vector<double> omega(freqs);
  for (std::size_t f = 0; f < freqs; ++f)
    omega[f] = std::numbers::pi *
               std::exp2(freqs > 1 ? 9.0 * static_cast<double>(f) / static_cast<double>(freqs - 1) : 0.0);
  MatrixD pe(coords.size(), d_model);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    auto row = pe.row(i);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t f = 0; f < freqs; ++f) {
        const double t = omega[f] * coords[i][a];
        row[a * per_axis + 2 * f] = std::sin(t);
        row[a * per_axis + 2 * f + 1] = std::cos(t);
      }
  }
  return pe;
}

inline double lowest_pe_period() { return 2.0; }

/// Maps each batch's coordinates into [0,1] by its bounding box, scaling
/// all axes by the largest extent.
inline std::vector<Vec3> normalize_per_batch(std::span<const Vec3> coords, std::span<const std::int64_t> batch) {
  if (coords.size() != batch.size()) throw IntegrityError("normalize: coord/batch size mismatch");
  std::vector<Vec3> lo, hi;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto b = static_cast<std::size_t>(batch[i]);
    if (b >= lo.size()) {
      lo.resize(b + 1, Vec3{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                            std::numeric_limits<double>::infinity()});
      hi.resize(b + 1, Vec3{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
                            -std::numeric_limits<double>::infinity()});
    }
    for (int a = 0; a < 3; ++a) {
      lo[b][a] = std::min(lo[b][a], coords[i][a]);
      hi[b][a] = std::max(hi[b][a], coords[i][a]);
    }
  }
  std::vector<Vec3> out(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto b = static_cast<std::size_t>(batch[i]);
    double ext = 0.0;
    for (int a = 0; a < 3; ++a) ext = std::max(ext, hi[b][a] - lo[b][a]);
    if (ext <= 0.0) ext = 1.0;
    for (int a = 0; a < 3; ++a) out[i][a] = (coords[i][a] - lo[b][a]) / ext;
  }
  return out;
}

}  // namespace psh3d
