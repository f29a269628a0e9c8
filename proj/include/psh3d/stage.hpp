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

// One transformer stage over a scattered feature array:
//   F'  = MHSA(LN1(F) + PE) + F        per scope of every round
//   F~  = MLP(LN2(F')) + F'
// Rounds run in sequence; every row keeps its index throughout.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "psh3d/attention.hpp"
#include "psh3d/error.hpp"
#include "psh3d/matrix.hpp"
#include "psh3d/parallel.hpp"
#include "psh3d/random.hpp"
#include "psh3d/schedule.hpp"

namespace psh3d {

inline constexpr double kLayerNormEps = 1e-10;

struct LayerNorm {
  std::vector<double> gain;
  std::vector<double> bias;
};

/// y = x W + b, W stored in x out.
struct Linear {
  MatrixD weight;
  std::vector<double> bias;

  std::size_t in() const noexcept { return weight.rows(); }
  std::size_t out() const noexcept { return weight.cols(); }
};

struct StageParams {
  AttentionParams attention;
  LayerNorm ln1, ln2;
  Linear wq, wk, wv, wo;
  Linear mlp_in, mlp_out;
  std::uint64_t seed = 0;

  std::size_t d_model() const noexcept { return attention.d_model; }
  std::size_t d_hidden() const noexcept { return mlp_in.out(); }

  void validate() const {
    attention.validate();
    const std::size_t d = d_model();
    auto check_ln = [&](const LayerNorm& ln, const char* name) {
      if (ln.gain.size() != d || ln.bias.size() != d) throw ConfigError(std::string("stage: ") + name + " shape");
      for (double x : ln.gain) if (!std::isfinite(x)) throw NumericError(std::string("stage: ") + name + " not finite");
      for (double x : ln.bias) if (!std::isfinite(x)) throw NumericError(std::string("stage: ") + name + " not finite");
    };
    auto check_lin = [&](const Linear& l, std::size_t in, std::size_t out, const char* name) {
      if (l.in() != in || l.out() != out || l.bias.size() != out)
        throw ConfigError(std::string("stage: ") + name + " shape");
      for (double x : l.weight.values()) if (!std::isfinite(x)) throw NumericError(std::string("stage: ") + name + " not finite");
      for (double x : l.bias) if (!std::isfinite(x)) throw NumericError(std::string("stage: ") + name + " not finite");
    };
    check_ln(ln1, "ln1");
    check_ln(ln2, "ln2");
    check_lin(wq, d, d, "wq");
    check_lin(wk, d, d, "wk");
    check_lin(wv, d, d, "wv");
    check_lin(wo, d, d, "wo");
    if (d_hidden() == 0) throw ConfigError("stage: d_hidden must be >= 1");
    check_lin(mlp_in, d, d_hidden(), "mlp_in");
    check_lin(mlp_out, d_hidden(), d, "mlp_out");
  }
};

/// Weights ~ U(-a, a) with a = sqrt(3 / fan_in), i.e. variance 1/fan_in;
/// biases zero; LayerNorm gain 1, bias 0. Draw order: wq, wk, wv, wo,
/// mlp_in, mlp_out, each row-major.
inline StageParams init_params(std::uint64_t seed, std::size_t d_model, std::size_t d_hidden, std::size_t n_heads,
                               std::size_t tile_rows = 64) {
  if (d_model == 0 || d_hidden == 0 || n_heads == 0) throw ConfigError("init_params: dims must be positive");
  StageParams p;
  p.seed = seed;
  p.attention = {d_model, n_heads, tile_rows};
  p.attention.validate();
  Rng rng(seed);
  auto linear = [&](std::size_t in, std::size_t out) {
    Linear l{MatrixD(in, out), std::vector<double>(out, 0.0)};
    const double a = std::sqrt(3.0 / static_cast<double>(in));
    for (auto& w : l.weight.values()) w = rng.uniform(-a, a);
    return l;
  };
  p.ln1 = p.ln2 = {std::vector<double>(d_model, 1.0), std::vector<double>(d_model, 0.0)};
  p.wq = linear(d_model, d_model);
  p.wk = linear(d_model, d_model);
  p.wv = linear(d_model, d_model);
  p.wo = linear(d_model, d_model);
  p.mlp_in = linear(d_model, d_hidden);
  p.mlp_out = linear(d_hidden, d_model);
  return p;
}

/// Row-wise (x - mean) / sqrt(var + eps), population variance, then gain/bias.
inline void layer_norm_row(std::span<const double> x, const LayerNorm& ln, std::span<double> y) {
  const auto n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t c = 0; c < x.size(); ++c) y[c] = (x[c] - mean) * inv * ln.gain[c] + ln.bias[c];
}

inline void linear_row(std::span<const double> x, const Linear& l, std::span<double> y) {
  for (std::size_t o = 0; o < l.out(); ++o) y[o] = l.bias[o];
  for (std::size_t i = 0; i < l.in(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto w = l.weight.row(i);
    for (std::size_t o = 0; o < l.out(); ++o) y[o] += xi * w[o];
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

enum class AttentionPath { Tiled, Reference };

struct StageOptions {
  AttentionPath path = AttentionPath::Tiled;
  std::size_t threads = 1;  // scopes of a round and rows are independent
  TileStats* stats = nullptr;
};

/// Runs every round of `schedule` over `features` (scattered order, one
/// row per point of `layout`). `coords` are in the same scattered order.
inline MatrixD stage_forward(const MatrixD& features, std::span<const Vec3> coords, const BucketLayout& layout,
                             const ScopeSchedule& schedule, const StageParams& params,
                             const StageOptions& opts = {}) {
  params.validate();
  schedule.validate();
  const std::size_t n = features.rows(), d = params.d_model();
  if (n != layout.num_points || coords.size() != n)
    throw ConfigError("stage: features/coords do not match the bucket layout (" + std::to_string(n) + " rows, " +
                      std::to_string(layout.num_points) + " points)");
  if (features.cols() != d) throw ConfigError("stage: feature width differs from d_model");
  if (schedule.num_buckets != layout.size())
    throw ConfigError("stage: schedule covers " + std::to_string(schedule.num_buckets) + " buckets, layout has " +
                      std::to_string(layout.size()));

  std::vector<std::int64_t> row_batch(n, 0);
  for (std::size_t b = 0; b < layout.size(); ++b)
    for (std::size_t i = layout.buckets[b].begin; i < layout.buckets[b].end; ++i) row_batch[i] = layout.batch[b];
  const MatrixD pe = positional_encoding(normalize_per_batch(coords, row_batch), d);

  MatrixD f = features;
  MatrixD q(n, d), k(n, d), v(n, d), attn(n, d);
  std::vector<TileStats> scope_stats;
  for (const auto& round : schedule.rounds) {
    parallel_for(n, opts.threads, [&](std::size_t i) {
      std::vector<double> x(d);
      layer_norm_row(f.row(i), params.ln1, x);
      auto p = pe.row(i);
      for (std::size_t c = 0; c < d; ++c) x[c] += p[c];
      linear_row(x, params.wq, q.row(i));
      linear_row(x, params.wk, k.row(i));
      linear_row(x, params.wv, v.row(i));
    });
    scope_stats.assign(round.size(), {});
    parallel_for(round.size(), opts.threads, [&](std::size_t s) {
      const auto ranges = logical_gather(layout, round[s]);
      if (total_rows(ranges) == 0) return;
      if (opts.path == AttentionPath::Tiled) {
        tiled_attention_into(q, k, v, ranges, params.attention, attn, &scope_stats[s]);
        return;
      }
      const auto out = reference_attention(gather_rows(q, ranges), gather_rows(k, ranges), gather_rows(v, ranges),
                                           params.attention);
      std::size_t r = 0;
      for (const auto& range : ranges)
        for (std::size_t i = range.begin; i < range.end; ++i, ++r)
          std::copy(out.row(r).begin(), out.row(r).end(), attn.row(i).begin());
    });
    if (opts.stats)
      for (const auto& st : scope_stats) {
        opts.stats->query_tiles += st.query_tiles;
        opts.stats->key_tiles += st.key_tiles;
        opts.stats->padded_rows += st.padded_rows;
        opts.stats->all_masked_queries += st.all_masked_queries;
      }
    parallel_for(n, opts.threads, [&](std::size_t i) {
      std::vector<double> h1(d), x(d), hid(params.d_hidden()), y(d);
      auto fi = f.row(i);
      linear_row(attn.row(i), params.wo, h1);
      for (std::size_t c = 0; c < d; ++c) h1[c] += fi[c];  // F'
      layer_norm_row(h1, params.ln2, x);
      linear_row(x, params.mlp_in, hid);
      for (auto& z : hid) z = gelu(z);
      linear_row(hid, params.mlp_out, y);
      for (std::size_t c = 0; c < d; ++c) fi[c] = y[c] + h1[c];
    });
  }
  return f;
}

inline MatrixD stage_forward(const MatrixD& features, std::span<const Vec3> coords, const BucketAssignment& a,
                             const ScopeSchedule& schedule, const StageParams& params,
                             const StageOptions& opts = {}) {
  return stage_forward(features, coords, bucket_layout(a), schedule, params, opts);
}

}  // namespace psh3d
