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

// Point cloud ingestion: ascii .xyz / ascii PLY readers, synthetic clouds,
// and the world -> voxel mapping consumed by the hash functions.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/random.hpp"

namespace psh3d {

using Vec3 = std::array<double, 3>;
using Voxel = std::array<std::int64_t, 3>;

struct PointCloud {
  std::vector<Vec3> coords;
  std::vector<std::int32_t> batch_id;

  std::size_t size() const noexcept { return coords.size(); }
  bool empty() const noexcept { return coords.empty(); }

  /// Number of batches; batch ids are contiguous from 0.
  std::size_t num_batches() const {
    std::int32_t hi = -1;
    for (auto b : batch_id) hi = std::max(hi, b);
    return static_cast<std::size_t>(hi + 1);
  }

  void validate() const {
    if (coords.size() != batch_id.size())
      throw IntegrityError("point cloud: " + std::to_string(coords.size()) + " coords but " +
                           std::to_string(batch_id.size()) + " batch ids");
    std::vector<bool> seen;
    for (auto b : batch_id) {
      if (b < 0) throw IntegrityError("point cloud: negative batch id " + std::to_string(b));
      if (static_cast<std::size_t>(b) >= seen.size()) seen.resize(b + 1, false);
      seen[b] = true;
    }
    for (std::size_t b = 0; b < seen.size(); ++b)
      if (!seen[b]) throw IntegrityError("point cloud: batch " + std::to_string(b) + " is empty");
  }
};

struct VoxelGrid {
  double voxel_size = 1.0;
  Vec3 origin{0.0, 0.0, 0.0};

  void validate() const {
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size))
      throw ConfigError("voxel_size must be positive and finite");
  }
};

/// v_i = floor((c_i - origin) / voxel_size), componentwise.
inline std::vector<Voxel> voxelize(const PointCloud& pc, const VoxelGrid& grid) {
  grid.validate();
  std::vector<Voxel> out(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i)
    for (int a = 0; a < 3; ++a)
      out[i][a] = static_cast<std::int64_t>(std::floor((pc.coords[i][a] - grid.origin[a]) / grid.voxel_size));
  return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n\f\v";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view tok, T& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc{} && ptr == tok.data() + tok.size();
}

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Parses `x y z [batch]` lines; `#` starts a comment.
inline PointCloud parse_xyz(std::string_view text) {
  PointCloud pc;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto toks = detail::split_ws(line);
    if (toks.size() != 3 && toks.size() != 4)
      throw ParseError("expected 3 or 4 fields, got " + std::to_string(toks.size()), line_no);
    Vec3 c;
    for (int a = 0; a < 3; ++a)
      if (!detail::parse_number(toks[a], c[a]) || !std::isfinite(c[a]))
        throw ParseError("bad coordinate '" + std::string(toks[a]) + "'", line_no);
    std::int32_t b = 0;
    if (toks.size() == 4 && (!detail::parse_number(toks[3], b) || b < 0))
      throw ParseError("bad batch id '" + std::string(toks[3]) + "'", line_no);
    pc.coords.push_back(c);
    pc.batch_id.push_back(b);
  }
  if (pc.empty()) throw EmptyInputError("point cloud has no points");
  try {
    pc.validate();
  } catch (const IntegrityError& e) {
    throw ParseError(e.what());
  }
  return pc;
}

inline PointCloud load_xyz(const std::string& path) { return parse_xyz(detail::read_file(path)); }

/// Shortest round-trip formatting, so load_xyz(write_xyz(pc)) == pc bitwise.
inline std::string format_xyz(const PointCloud& pc) {
  const bool with_batch = pc.num_batches() > 1;
  std::string out;
  out.reserve(pc.size() * 32);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      if (a) out.push_back(' ');
      detail::append_double(out, pc.coords[i][a]);
    }
    if (with_batch) {
      out.push_back(' ');
      out += std::to_string(pc.batch_id[i]);
    }
    out.push_back('\n');
  }
  return out;
}

inline void write_xyz(const std::string& path, const PointCloud& pc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << format_xyz(pc);
}

/// Minimal ascii PLY: reads x, y, z of `element vertex`; other vertex
/// properties and later elements are ignored.
inline PointCloud parse_ply(std::string_view text) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    line = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    return true;
  };
  std::string_view line;
  if (!next_line(line) || line != "ply") throw ParseError("missing 'ply' magic", 1);
  std::size_t n_vertex = 0;
  bool in_vertex = false, have_vertex = false, ascii = false;
  std::vector<std::string> props;
  for (;;) {
    if (!next_line(line)) throw ParseError("unterminated header", line_no);
    auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks[0] == "end_header") break;
    if (toks[0] == "format") {
      if (toks.size() < 2 || toks[1] != "ascii") throw ParseError("only ascii PLY is supported", line_no);
      ascii = true;
    } else if (toks[0] == "element") {
      if (toks.size() != 3) throw ParseError("bad element line", line_no);
      in_vertex = toks[1] == "vertex";
      if (in_vertex) {
        if (have_vertex) throw ParseError("duplicate vertex element", line_no);
        if (!detail::parse_number(toks[2], n_vertex)) throw ParseError("bad vertex count", line_no);
        have_vertex = true;
      } else if (!have_vertex) {
        throw ParseError("vertex element must come first", line_no);
      }
    } else if (toks[0] == "property" && in_vertex) {
      if (toks.size() < 3 || toks[1] == "list") throw ParseError("unsupported vertex property", line_no);
      props.emplace_back(toks.back());
    }
  }
  if (!ascii) throw ParseError("missing format line");
  int col[3] = {-1, -1, -1};
  for (std::size_t p = 0; p < props.size(); ++p)
    for (int a = 0; a < 3; ++a)
      if (props[p] == std::string(1, static_cast<char>('x' + a))) col[a] = static_cast<int>(p);
  for (int a = 0; a < 3; ++a)
    if (col[a] < 0) throw ParseError(std::string("missing vertex property ") + static_cast<char>('x' + a));
  if (n_vertex == 0) throw EmptyInputError("PLY has no vertices");
  PointCloud pc;
  pc.coords.reserve(n_vertex);
  while (pc.size() < n_vertex) {
    if (!next_line(line)) throw ParseError("expected " + std::to_string(n_vertex) + " vertices", line_no);
    if (line.empty()) continue;
    auto toks = detail::split_ws(line);
    if (toks.size() != props.size())
      throw ParseError("expected " + std::to_string(props.size()) + " fields", line_no);
    Vec3 c;
    for (int a = 0; a < 3; ++a)
      if (!detail::parse_number(toks[col[a]], c[a])) throw ParseError("bad coordinate", line_no);
    pc.coords.push_back(c);
  }
  pc.batch_id.assign(pc.size(), 0);
  return pc;
}

inline PointCloud load_ply(const std::string& path) { return parse_ply(detail::read_file(path)); }

/// Dispatches on extension: .ply -> PLY, anything else -> xyz.
inline PointCloud load_cloud(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".ply") == 0) return load_ply(path);
  return load_xyz(path);
}

enum class CloudDistribution { UniformBox, GaussianClusters, SurfaceShell };

inline CloudDistribution parse_distribution(std::string_view s) {
  if (s == "uniform-box") return CloudDistribution::UniformBox;
  if (s == "gaussian-clusters") return CloudDistribution::GaussianClusters;
  if (s == "surface-shell") return CloudDistribution::SurfaceShell;
  throw ConfigError("unknown distribution '" + std::string(s) + "'");
}

inline constexpr int kSynthClusters = 6;
inline constexpr double kSynthClusterStd = 0.03;

/// Deterministic synthetic cloud, all in batch 0.
///   uniform-box:       iid uniform in [0,1)^3
///   gaussian-clusters: 6 isotropic clusters (std 0.03), centres in [0.15,0.85)^3
///   surface-shell:     sphere r=0.4 about (0.5,0.5,0.5), radial jitter std 0.005
inline PointCloud synth_cloud(std::uint64_t seed, std::size_t n, CloudDistribution dist) {
  if (n == 0) throw EmptyInputError("synth_cloud: n must be >= 1");
  Rng rng(seed);
  PointCloud pc;
  pc.coords.resize(n);
  pc.batch_id.assign(n, 0);
  switch (dist) {
    case CloudDistribution::UniformBox:
      for (auto& c : pc.coords) c = {rng.uniform(), rng.uniform(), rng.uniform()};
      break;
    case CloudDistribution::GaussianClusters: {
      std::array<Vec3, kSynthClusters> centres;
      for (auto& c : centres) c = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
      for (auto& p : pc.coords) {
        const auto& c = centres[rng.below(kSynthClusters)];
        for (int a = 0; a < 3; ++a) p[a] = c[a] + kSynthClusterStd * rng.normal();
      }
      break;
    }
    case CloudDistribution::SurfaceShell:
      for (auto& p : pc.coords) {
        double d[3], len;
        do {
          for (double& x : d) x = rng.normal();
          len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        } while (len < 1e-12);
        const double r = 0.4 + 0.005 * rng.normal();
        for (int a = 0; a < 3; ++a) p[a] = 0.5 + r * d[a] / len;
      }
      break;
  }
  return pc;
}

/// Concatenates clouds, giving part k batch id k.
inline PointCloud concat_batches(std::span<const PointCloud> parts) {
  PointCloud pc;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    pc.coords.insert(pc.coords.end(), parts[k].coords.begin(), parts[k].coords.end());
    pc.batch_id.insert(pc.batch_id.end(), parts[k].size(), static_cast<std::int32_t>(k));
  }
  return pc;
}

}  // namespace psh3d
