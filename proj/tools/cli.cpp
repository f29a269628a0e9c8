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

#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "psh3d/psh3d.hpp"

namespace psh3d::cli {
namespace {

using json = nlohmann::json;

// ---------------------------------------------------------------- options

struct CloudOpts {
  std::string in;
  std::size_t synth = 0;
  std::string dist = "uniform-box";
};

struct HashOpts {
  std::string hash = "zorder-div";
  std::int64_t buckets = kDefaultBuckets;
  std::int64_t capacity = kDefaultCapacity;
  std::uint64_t divisor = 0;  // 0: derive from the voxel range
  unsigned bits = 10;
  bool strict_div = false;
  std::size_t max_probes = 32;
  bool shuffle_probes = false;
  bool two_stage = false;
  std::size_t block_size = 256;
};

struct ScheduleOpts {
  std::size_t window = 2;
  std::size_t stride = 1;
  std::size_t shift = 1;
  std::size_t rounds = 2;
};

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void add_cloud_opts(CLI::App* app, CloudOpts& o) {
  app->add_option("--in", o.in, "Input cloud (.xyz or ascii .ply)");
  app->add_option("--synth", o.synth, "Generate a synthetic cloud with this many points instead of --in");
  app->add_option("--dist", o.dist, "Synthetic distribution")
      ->check(CLI::IsMember({"uniform-box", "gaussian-clusters", "surface-shell"}));
}

void add_hash_opts(CLI::App* app, HashOpts& o) {
  app->add_option("--hash", o.hash, "Bucket hash")->check(CLI::IsMember({"xor-mod", "xor-div", "zorder-mod", "zorder-div"}));
  app->add_option("--K", o.buckets, "Buckets per batch")->check(CLI::PositiveNumber);
  app->add_option("--S", o.capacity, "Bucket capacity")->check(CLI::PositiveNumber);
  app->add_option("--S-div", o.divisor, "Divisor for div hashes (default: derived from the voxel range)");
  app->add_option("--bits", o.bits, "Morton bits per axis")->check(CLI::Range(1, 21));
  app->add_flag("--strict-div", o.strict_div, "Reject div-hash quotients >= K instead of reducing mod K");
  app->add_option("--max-probes", o.max_probes, "Rebalancing probes before recycling");
  app->add_flag("--shuffle-probes", o.shuffle_probes, "Shuffle probe offsets within each ring by --seed");
  app->add_flag("--two-stage", o.two_stage, "Use block-local two-stage counters");
  app->add_option("--block-size", o.block_size, "Two-stage block size")->check(CLI::PositiveNumber);
}

void add_schedule_opts(CLI::App* app, ScheduleOpts& o) {
  app->add_option("--window", o.window, "Buckets per attention scope")->check(CLI::PositiveNumber);
  app->add_option("--stride", o.stride, "Bucket stride within a scope")->check(CLI::PositiveNumber);
  app->add_option("--shift", o.shift, "Window shift per round");
  app->add_option("--rounds", o.rounds, "Attention rounds");
}

// ---------------------------------------------------------------- helpers

void write_output(const std::string& path, const std::string& text, std::ostream& out) {
  if (path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

PointCloud load_source(const CloudOpts& o, std::uint64_t seed) {
  if (!o.in.empty() && o.synth) throw ConfigError("give either --in or --synth, not both");
  if (!o.in.empty()) return load_cloud(o.in);
  if (o.synth) return synth_cloud(seed, o.synth, parse_distribution(o.dist));
  throw ConfigError("an input cloud is required (--in or --synth)");
}

void require_attention_capacity(std::int64_t capacity) {
  if (capacity % static_cast<std::int64_t>(kTileAlign))
    throw ConfigError("bucket capacity S must be a multiple of 16 for attention");
}

struct Bucketing {
  std::vector<Voxel> voxels;
  HashConfig cfg;
  BucketAssignment assignment;
};

Bucketing bucketize(const PointCloud& pc, double voxel_size, const HashOpts& o, const Globals& g) {
  Bucketing b;
  b.voxels = remap_per_batch(voxelize(pc, VoxelGrid{voxel_size, {0, 0, 0}}), pc.batch_id);
  b.cfg.kind = parse_hash_kind(o.hash);
  b.cfg.num_buckets = static_cast<std::uint32_t>(o.buckets);
  b.cfg.bits_per_axis = o.bits;
  b.cfg.strict_div = o.strict_div;
  b.cfg.divisor = o.divisor ? o.divisor : (is_div(b.cfg.kind) ? auto_divisor(b.voxels, b.cfg) : 1);
  b.cfg.validate();
  const auto probes = default_probe_schedule(g.seed, o.shuffle_probes, o.max_probes);
  if (o.two_stage) {
    TwoStageOptions ts;
    ts.block_size = o.block_size;
    b.assignment = assign_buckets_two_stage(b.voxels, pc.batch_id, b.cfg, o.capacity, probes, ts);
  } else {
    b.assignment = assign_buckets(b.voxels, pc.batch_id, b.cfg, o.capacity, probes, {g.threads, nullptr});
  }
  b.assignment.validate();
  return b;
}

// Regular buckets as point groups, and a random partition of the same
// points (within each batch) into groups of the same sizes.
json locality_json(std::span<const Vec3> coords, const BucketAssignment& a, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(a.num_slots()));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a.is_recycle(a.bucket_id[i])) groups[a.bucket_id[i]].push_back(i);
  std::vector<std::vector<std::size_t>> random_groups;
  for (std::int64_t b = 0; b < a.num_batches; ++b) {
    std::vector<std::size_t> sizes, members;
    for (std::int64_t k = 0; k < a.num_buckets; ++k) {
      const auto& g = groups[b * a.slots_per_batch() + k];
      sizes.push_back(g.size());
      members.insert(members.end(), g.begin(), g.end());
    }
    auto part = random_partition(sizes, members.size(), seed + static_cast<std::uint64_t>(b), members);
    random_groups.insert(random_groups.end(), part.begin(), part.end());
  }
  const auto ours = intra_group_distance(coords, groups).mean();
  const auto rnd = intra_group_distance(coords, random_groups).mean();
  return {{"mean_intra_bucket_distance", ours},
          {"mean_random_partition_distance", rnd},
          {"ratio", rnd > 0 ? ours / rnd : 0.0}};
}

json assignment_summary(const PointCloud& pc, const Bucketing& b, std::uint64_t seed) {
  const auto& a = b.assignment;
  const std::int64_t bins = 16;
  const std::int64_t width = std::max<std::int64_t>(1, (a.capacity + bins - 1) / bins);
  std::vector<std::int64_t> freq(static_cast<std::size_t>(a.capacity / width + 1), 0);
  for (std::int64_t s = 0; s < a.num_slots(); ++s)
    if (!a.is_recycle(s)) ++freq[static_cast<std::size_t>(a.counts[s] / width)];
  return {{"n", a.size()},
          {"num_batches", a.num_batches},
          {"K", a.num_buckets},
          {"S", a.capacity},
          {"hash", std::string(to_string(b.cfg.kind))},
          {"divisor", b.cfg.divisor},
          {"counts", a.counts},
          {"occupancy_histogram", {{"bin_width", width}, {"frequencies", freq}}},
          {"recycle_count", a.recycle_count()},
          {"recycle_fraction", a.recycle_fraction()},
          {"locality", locality_json(pc.coords, a, seed)},
          {"invariants", {{"bijection", true}, {"capacity", true}}}};
}

json schedule_to_json(const ScopeSchedule& s) {
  return {{"num_buckets", s.num_buckets}, {"window", s.window}, {"stride", s.stride},
          {"shift", s.shift}, {"rounds", s.rounds}};
}

ScopeSchedule schedule_from_json(const json& j) {
  ScopeSchedule s;
  try {
    s.num_buckets = j.at("num_buckets").get<std::size_t>();
    s.window = j.value("window", std::size_t{1});
    s.stride = j.value("stride", std::size_t{1});
    s.shift = j.value("shift", std::size_t{0});
    s.rounds = j.at("rounds").get<std::vector<Round>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("schedule JSON: ") + e.what());
  }
  s.validate();
  return s;
}

json scopes_trace(const ScopeSchedule& s, const BucketLayout& layout) {
  json rounds = json::array();
  for (std::size_t t = 0; t < s.rounds.size(); ++t) {
    json scopes = json::array();
    for (const auto& scope : s.rounds[t]) {
      std::size_t pts = 0;
      for (auto b : scope) pts += layout.buckets[b].size();
      scopes.push_back({{"buckets", scope}, {"points", pts}});
    }
    rounds.push_back({{"round", t}, {"scopes", scopes}});
  }
  return rounds;
}

// Seeded linear lift of [x, y, z, 1] to d features.
MatrixD embed_coords(std::span<const Vec3> coords, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  MatrixD w(4, d);
  for (auto& x : w.values()) x = rng.uniform(-1.0, 1.0);
  MatrixD f(coords.size(), d);
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t c = 0; c < d; ++c)
      f(i, c) = coords[i][0] * w(0, c) + coords[i][1] * w(1, c) + coords[i][2] * w(2, c) + w(3, c);
  return f;
}

double relative_frobenius(const MatrixD& got, const MatrixD& want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < got.values().size(); ++i) {
    const double e = got.values()[i] - want.values()[i];
    num += e * e;
    den += want.values()[i] * want.values()[i];
  }
  return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

std::vector<double> parse_sizes(const std::string& spec) {
  std::vector<double> out;
  auto num = [](const std::string& s) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (...) {
      pos = 0;
    }
    if (pos != s.size() || !(v >= 1)) throw ConfigError("--sizes: bad value '" + s + "'");
    return v;
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("--sizes: expected start:stop:step");
    const double lo = num(parts[0]), hi = num(parts[1]), step = num(parts[2]);
    for (double n = lo; n <= hi * (1 + 1e-12); n += step) out.push_back(n);
  } else {
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  }
  if (out.empty()) throw ConfigError("--sizes: no sizes");
  return out;
}

// ---------------------------------------------------------------- commands

struct BucketCmd {
  CloudOpts cloud;
  HashOpts hash;
  ScheduleOpts sched;
  double voxel_size = 0;
  std::string out_csv = "assignment.csv";
  std::string out_json = "-";
  std::string schedule_out;
  std::string scattered_out;
};

int cmd_bucket(const BucketCmd& c, const Globals& g, std::ostream& out) {
  const auto pc = load_source(c.cloud, g.seed);
  const auto b = bucketize(pc, c.voxel_size, c.hash, g);
  write_output(c.out_csv, format_assignment_csv(b.assignment), out);
  if (!c.schedule_out.empty()) {
    const auto layout = bucket_layout(b.assignment);
    write_output(c.schedule_out,
                 dump(schedule_to_json(schedule_for_layout(layout, c.sched.window, c.sched.stride, c.sched.shift,
                                                           c.sched.rounds))),
                 out);
  }
  if (!c.scattered_out.empty()) {
    PointCloud scattered;
    scattered.coords = scatter_values<Vec3>(pc.coords, b.assignment);
    scattered.batch_id = scatter_values<std::int32_t>(pc.batch_id, b.assignment);
    write_output(c.scattered_out, format_xyz(scattered), out);
  }
  write_output(c.out_json, dump(assignment_summary(pc, b, g.seed)), out);
  return kExitOk;
}

struct AttendCmd {
  std::string features, assignment, schedule;
  ScheduleOpts sched;
  std::int64_t buckets = kDefaultBuckets, capacity = kDefaultCapacity;
  std::size_t heads = 0, tile_rows = 64;
  std::string precision = "double";
  std::string out = "attended.csv";
  std::string report = "-";
};

template <typename T>
MatrixD attend_rounds(const MatrixD& input, const BucketLayout& layout, const ScopeSchedule& sched,
                      const AttentionParams& params, std::size_t threads, json& rounds_report, double& max_err,
                      TileStats& stats) {
  Matrix<T> f = matrix_cast<T>(input);
  for (std::size_t t = 0; t < sched.rounds.size(); ++t) {
    const auto& round = sched.rounds[t];
    Matrix<T> next(f.rows(), f.cols());
    std::vector<double> errs(round.size(), 0.0);
    std::vector<TileStats> st(round.size());
    parallel_for(round.size(), threads, [&](std::size_t s) {
      const auto ranges = logical_gather(layout, round[s]);
      if (total_rows(ranges) == 0) return;
      tiled_attention_into(f, f, f, ranges, params, next, &st[s]);
      const auto sub = gather_rows(f, ranges);
      const auto ref = reference_attention(sub, sub, sub, params);
      errs[s] = relative_frobenius(matrix_cast<double>(gather_rows(next, ranges)), matrix_cast<double>(ref));
    });
    double round_max = 0;
    for (std::size_t s = 0; s < round.size(); ++s) {
      round_max = std::max(round_max, errs[s]);
      stats.query_tiles += st[s].query_tiles;
      stats.key_tiles += st[s].key_tiles;
      stats.padded_rows += st[s].padded_rows;
      stats.all_masked_queries += st[s].all_masked_queries;
    }
    max_err = std::max(max_err, round_max);
    rounds_report.push_back({{"round", t}, {"scopes", round.size()}, {"max_relative_error", round_max}});
    f = std::move(next);
  }
  return matrix_cast<double>(f);
}

int cmd_attend(const AttendCmd& c, const Globals& g, std::ostream& out, std::ostream& err) {
  require_attention_capacity(c.capacity);
  const auto features = load_matrix_csv(c.features);
  const auto a = load_assignment_csv(c.assignment, c.buckets, c.capacity);
  if (features.rows() != a.size()) throw ConfigError("features and assignment have different point counts");
  const auto layout = bucket_layout(a);
  ScopeSchedule sched;
  if (!c.schedule.empty()) {
    std::ifstream in(c.schedule);
    if (!in) throw ConfigError("cannot open '" + c.schedule + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ParseError(std::string("schedule JSON: ") + e.what());
    }
    sched = schedule_from_json(j);
  } else {
    sched = schedule_for_layout(layout, c.sched.window, c.sched.stride, c.sched.shift, c.sched.rounds);
  }
  if (sched.num_buckets != layout.size())
    throw ConfigError("schedule covers " + std::to_string(sched.num_buckets) + " buckets, assignment has " +
                      std::to_string(layout.size()));
  AttentionParams params{features.cols(), c.heads, c.tile_rows};
  params.validate();

  const auto before = instrumentation::feature_bytes_moved();
  for (const auto& round : sched.rounds)
    for (const auto& scope : round) (void)logical_gather(layout, scope);
  const auto gather_bytes = instrumentation::feature_bytes_moved() - before;

  json rounds = json::array();
  double max_err = 0;
  TileStats stats;
  const MatrixD result = c.precision == "float"
                             ? attend_rounds<float>(features, layout, sched, params, g.threads, rounds, max_err, stats)
                             : attend_rounds<double>(features, layout, sched, params, g.threads, rounds, max_err, stats);
  if (stats.all_masked_queries) err << "warning: " << stats.all_masked_queries << " queries had no unmasked keys\n";
  write_output(c.out, format_matrix_csv(result), out);
  write_output(c.report,
               dump({{"n", features.rows()},
                     {"d_model", params.d_model},
                     {"heads", params.n_heads},
                     {"tile_rows", params.tile_rows},
                     {"precision", c.precision},
                     {"rounds", rounds},
                     {"max_relative_error", max_err},
                     {"gather_feature_bytes", gather_bytes},
                     {"tile_stats",
                      {{"query_tiles", stats.query_tiles},
                       {"key_tiles", stats.key_tiles},
                       {"padded_rows", stats.padded_rows},
                       {"all_masked_queries", stats.all_masked_queries}}}}),
               out);
  return kExitOk;
}

struct StageCmd {
  CloudOpts cloud;
  HashOpts hash;
  ScheduleOpts sched;
  double voxel_size = 0;
  std::size_t d_model = 24, heads = 4, hidden = 0, tile_rows = 64;
  std::size_t rho = 0;
  std::string reduce = "mean";
  bool check_reference = false;
  std::string out = "stage_features.csv";
  std::string assignment_out;
  std::string trace = "-";
};

int cmd_stage(const StageCmd& c, const Globals& g, std::ostream& out) {
  require_attention_capacity(c.hash.capacity);
  const auto pc = load_source(c.cloud, g.seed);
  const auto b = bucketize(pc, c.voxel_size, c.hash, g);
  const auto& a = b.assignment;
  const auto coords = scatter_values<Vec3>(pc.coords, a);
  const auto features = scatter(embed_coords(pc.coords, c.d_model, g.seed + 1), a).scattered;
  const auto layout = bucket_layout(a);
  const auto sched = schedule_for_layout(layout, c.sched.window, c.sched.stride, c.sched.shift, c.sched.rounds);
  const auto params = init_params(g.seed, c.d_model, c.hidden ? c.hidden : 4 * c.d_model, c.heads, c.tile_rows);

  const auto before = instrumentation::feature_bytes_moved();
  for (const auto& round : sched.rounds)
    for (const auto& scope : round) (void)logical_gather(layout, scope);
  const auto gather_bytes = instrumentation::feature_bytes_moved() - before;

  TileStats stats;
  auto result = stage_forward(features, coords, layout, sched, params, {AttentionPath::Tiled, g.threads, &stats});
  json trace = {{"n", a.size()},
                {"num_buckets", layout.size()},
                {"d_model", c.d_model},
                {"heads", c.heads},
                {"rounds", scopes_trace(sched, layout)},
                {"gather_feature_bytes", gather_bytes},
                {"all_masked_queries", stats.all_masked_queries}};
  if (c.check_reference) {
    const auto ref = stage_forward(features, coords, layout, sched, params, {AttentionPath::Reference, g.threads});
    trace["reference_relative_error"] = relative_frobenius(result, ref);
  }
  BucketAssignment out_assignment = a;
  if (c.rho) {
    auto pooled = pool_stage(result, coords, a, c.rho, parse_reduce(c.reduce), g.threads);
    trace["pooling"] = {{"rho", c.rho}, {"reduce", c.reduce}, {"output_points", pooled.features.rows()},
                        {"subbucket_size_histogram", pooled.subbucket_sizes}};
    result = std::move(pooled.features);
    out_assignment = std::move(pooled.assignment);
  }
  write_output(c.out, format_matrix_csv(result), out);
  if (!c.assignment_out.empty()) write_output(c.assignment_out, format_assignment_csv(out_assignment), out);
  write_output(c.trace, dump(trace), out);
  return kExitOk;
}

struct PoolCmd {
  std::string features, assignment, coords;
  std::int64_t buckets = kDefaultBuckets, capacity = kDefaultCapacity;
  std::size_t rho = 2;
  std::string reduce = "mean";
  std::string out = "pooled.csv";
  std::string assignment_out = "pooled_assignment.csv";
  std::string stats = "-";
};

json pool_locality(std::span<const Vec3> coords, const PoolResult& r, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> groups(r.features.rows()), random_groups;
  for (std::size_t i = 0; i < r.parent.size(); ++i) groups[r.parent[i]].push_back(i);
  for (std::size_t t = 0; t < r.tile_rows.size(); ++t) {
    const auto& tr = r.tile_rows[t];
    std::vector<std::size_t> members(tr.size()), sizes;
    std::iota(members.begin(), members.end(), tr.begin);
    std::size_t lo = r.features.rows(), hi = 0;
    for (auto i : members) {
      lo = std::min(lo, r.parent[i]);
      hi = std::max(hi, r.parent[i]);
    }
    for (std::size_t p = lo; p <= hi; ++p) sizes.push_back(groups[p].size());
    auto part = random_partition(sizes, members.size(), seed + t, members);
    random_groups.insert(random_groups.end(), part.begin(), part.end());
  }
  const auto ours = intra_group_distance(coords, groups).mean();
  const auto rnd = intra_group_distance(coords, random_groups).mean();
  return {{"mean_intra_subbucket_distance", ours},
          {"mean_random_partition_distance", rnd},
          {"ratio", rnd > 0 ? ours / rnd : 0.0}};
}

json pool_stats_json(const PoolResult& r, std::span<const Vec3> coords, std::size_t rho, const std::string& reduce,
                     std::uint64_t seed) {
  return {{"rho", rho},
          {"reduce", reduce},
          {"tiles", r.tiles},
          {"input_points", r.parent.size()},
          {"output_points", r.features.rows()},
          {"counts", r.assignment.counts},
          {"subbucket_size_histogram", r.subbucket_sizes},
          {"max_passes", r.max_passes},
          {"locality", pool_locality(coords, r, seed)}};
}

int cmd_pool(const PoolCmd& c, const Globals& g, std::ostream& out) {
  const auto features = load_matrix_csv(c.features);
  const auto a = load_assignment_csv(c.assignment, c.buckets, c.capacity);
  const auto cloud = load_cloud(c.coords);
  if (features.rows() != a.size() || cloud.size() != a.size())
    throw ConfigError("features, assignment and coords have different point counts");
  const auto coords = scatter_values<Vec3>(cloud.coords, a);
  const auto r = pool_stage(features, coords, a, c.rho, parse_reduce(c.reduce), g.threads);
  write_output(c.out, format_matrix_csv(r.features), out);
  write_output(c.assignment_out, format_assignment_csv(r.assignment), out);
  write_output(c.stats, dump(pool_stats_json(r, coords, c.rho, c.reduce, g.seed)), out);
  return kExitOk;
}

struct CostCmd {
  std::string sizes = "100000:600000:100000";
  std::string pipeline = "both";
  std::vector<std::string> rates;
  double d = 64;
  std::size_t rounds = 4;
  std::int64_t buckets = kDefaultBuckets, capacity = kDefaultCapacity;
  std::string precision = "half";
  bool json_out = false;
  std::string out = "-";
};

MachineModel machine_from(const std::vector<std::string>& rates, const std::string& precision) {
  MachineModel mm;
  mm.precision = precision == "single" ? Precision::Single : Precision::Half;
  for (const auto& kv : rates) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--rates expects key=value, got '" + kv + "'");
    std::size_t pos = 0;
    double v = 0;
    const std::string val = kv.substr(eq + 1);
    try {
      v = std::stod(val, &pos);
    } catch (...) {
      pos = 0;
    }
    if (pos != val.size()) throw ConfigError("--rates: bad value in '" + kv + "'");
    mm.set(kv.substr(0, eq), v);
  }
  mm.validate();
  return mm;
}

json machine_json(const MachineModel& mm) {
  return {{"dram_to_l1_rate", mm.dram_to_l1_rate},
          {"random_shuffle_rate", mm.random_shuffle_rate},
          {"flop_rate", mm.flop_rate},
          {"attn_flop_rate", mm.attn_flop_rate},
          {"sort_constant", mm.sort_constant},
          {"psh_ops_per_point", mm.psh_ops_per_point},
          {"scope_points", mm.scope_points},
          {"precision", mm.precision == Precision::Half ? "half" : "single"}};
}

int cmd_cost(const CostCmd& c, std::ostream& out) {
  const auto sizes = parse_sizes(c.sizes);
  const auto mm = machine_from(c.rates, c.precision);
  std::vector<Pipeline> pipes;
  if (c.pipeline != "flash3d") pipes.push_back(Pipeline::Ptv3);
  if (c.pipeline != "ptv3") pipes.push_back(Pipeline::Flash3d);
  const SweepConfig cfg{c.d, c.rounds, c.buckets, c.capacity};
  if (!c.json_out) {
    write_output(c.out, sweep_report(sizes, pipes, cfg, mm), out);
    return kExitOk;
  }
  json rows = json::array();
  double min_ratio = std::numeric_limits<double>::infinity();
  std::vector<double> totals_p, totals_f;
  for (double n : sizes) {
    const auto p = model_ptv3(n, c.d, c.rounds, mm);
    const auto f = model_flash3d(n, c.d, c.rounds, c.buckets, c.capacity, mm);
    min_ratio = std::min(min_ratio, serialization_psh_ratio(p, f));
    totals_p.push_back(p.total_seconds());
    totals_f.push_back(f.total_seconds());
    for (auto which : pipes) {
      const auto& r = which == Pipeline::Ptv3 ? p : f;
      rows.push_back({{"pipeline", std::string(to_string(which))},
                      {"n", r.n},
                      {"load_s", r.load.seconds},
                      {"shuffle_s", r.shuffle.seconds},
                      {"attention_s", r.attention.seconds},
                      {"writeback_s", r.writeback.seconds},
                      {"total_s", r.total_seconds()},
                      {"bytes_moved", r.total_bytes()}});
    }
  }
  json summary = {{"modeled", true},
                  {"machine", machine_json(mm)},
                  {"d", c.d},
                  {"rounds", c.rounds},
                  {"rows", rows},
                  {"min_serialization_psh_ratio", min_ratio}};
  write_output(c.out, dump(summary), out);
  return kExitOk;
}

struct DemoCmd {
  std::size_t n = 100000;
  double voxel_size = 0.02;
  std::string out_dir = "demo_out";
  std::size_t d_model = 12, heads = 2;
  std::size_t rho = 2;
};

int cmd_demo(const DemoCmd& c, const Globals& g, std::ostream& out) {
  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  auto path = [&](const char* name) { return (fs::path(c.out_dir) / name).string(); };
  json checks = json::object();
  auto check = [&](const char* name, bool ok) {
    checks[name] = ok;
    out << "check " << name << ": " << (ok ? "ok" : "FAILED") << "\n";
    if (!ok) throw IntegrityError(std::string("demo check failed: ") + name);
  };

  const auto pc = synth_cloud(g.seed, c.n, CloudDistribution::UniformBox);
  HashOpts ho;
  const auto b = bucketize(pc, c.voxel_size, ho, g);
  const auto& a = b.assignment;
  check("bijection_and_capacity", true);  // bucketize validated

  TwoStageOptions ts;
  ts.block_size = 256;
  const auto two = assign_buckets_two_stage(b.voxels, pc.batch_id, b.cfg, a.capacity,
                                            default_probe_schedule(g.seed, false, ho.max_probes), ts);
  two.validate();
  check("two_stage_counts_match", two.counts == a.counts);

  const auto coords = scatter_values<Vec3>(pc.coords, a);
  const auto features = scatter(embed_coords(pc.coords, c.d_model, g.seed + 1), a).scattered;
  const auto layout = bucket_layout(a);
  const auto sched = schedule_for_layout(layout, 2, 1, 1, 2);
  const auto before = instrumentation::feature_bytes_moved();
  for (const auto& round : sched.rounds)
    for (const auto& scope : round) (void)logical_gather(layout, scope);
  check("zero_copy_gather", instrumentation::feature_bytes_moved() == before);

  const auto params = init_params(g.seed, c.d_model, 4 * c.d_model, c.heads);
  TileStats stats;
  const auto staged = stage_forward(features, coords, layout, sched, params, {AttentionPath::Tiled, g.threads, &stats});
  check("no_empty_attention_rows", stats.all_masked_queries == 0);

  const auto pooled = pool_stage(staged, coords, a, c.rho, Reduce::Mean, g.threads);
  const auto summed = pool_stage(staged, coords, a, c.rho, Reduce::Sum, g.threads);
  double in_sum = 0, out_sum = 0, scale = 0;
  for (double x : staged.values()) {
    in_sum += x;
    scale += std::abs(x);
  }
  for (double x : summed.features.values()) out_sum += x;
  check("pool_sum_conserved", std::abs(in_sum - out_sum) <= 1e-9 * std::max(scale, 1.0));

  const std::vector<double> sizes{1e5, 2e5, 3e5, 4e5, 5e5, 6e5};
  const std::vector<Pipeline> pipes{Pipeline::Ptv3, Pipeline::Flash3d};
  const auto cost_csv = sweep_report(sizes, pipes);

  write_output(path("assignment.csv"), format_assignment_csv(a), out);
  write_output(path("stage_features.csv"), format_matrix_csv(staged), out);
  write_output(path("pooled_features.csv"), format_matrix_csv(pooled.features), out);
  write_output(path("pooled_assignment.csv"), format_assignment_csv(pooled.assignment), out);
  write_output(path("cost.csv"), cost_csv, out);
  json summary = {{"seed", g.seed},
                  {"n", c.n},
                  {"bucketing", assignment_summary(pc, b, g.seed)},
                  {"schedule", {{"window", 2}, {"stride", 1}, {"shift", 1}, {"rounds", 2}, {"num_buckets", layout.size()}}},
                  {"pooling", pool_stats_json(pooled, coords, c.rho, "mean", g.seed)},
                  {"checks", checks}};
  write_output(path("summary.json"), dump(summary), out);
  out << "demo: n=" << c.n << " buckets=" << layout.size() << " recycle_fraction=" << a.recycle_fraction()
      << " pooled=" << pooled.features.rows() << " artifacts in " << c.out_dir << "\n";
  return kExitOk;
}

void print_error(std::ostream& err, const char* kind, const std::string& msg) {
  err << json{{"error", {{"kind", kind}, {"message", msg}}}}.dump() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"psh3d: spatial-hash bucketing, bucket-swin attention, in-bucket pooling, cost model"};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "TOML/INI config file; unknown keys are rejected");
  Globals g;
  g.threads = default_thread_count();
  app.add_option("--seed", g.seed, "Seed for every stochastic choice");
  app.add_option("--threads", g.threads, "Worker threads (1 = reference path; default from PSH3D_THREADS)")
      ->check(CLI::PositiveNumber);

  BucketCmd bucket;
  auto* sb = app.add_subcommand("bucket", "Bucket a cloud; write assignment CSV and JSON summary");
  add_cloud_opts(sb, bucket.cloud);
  add_hash_opts(sb, bucket.hash);
  add_schedule_opts(sb, bucket.sched);
  sb->add_option("--voxel-size", bucket.voxel_size, "World units per voxel")->required()->check(CLI::PositiveNumber);
  sb->add_option("--out-csv", bucket.out_csv, "Assignment CSV ('-' = stdout)");
  sb->add_option("--out-json", bucket.out_json, "Summary JSON ('-' = stdout)");
  sb->add_option("--schedule-out", bucket.schedule_out, "Also write a scope schedule JSON");
  sb->add_option("--scattered-out", bucket.scattered_out, "Also write the cloud in scattered order (.xyz)");

  AttendCmd attend;
  auto* sa = app.add_subcommand("attend", "Tiled attention over a scattered feature array, checked against the dense oracle");
  sa->add_option("--features", attend.features, "Scattered feature CSV")->required();
  sa->add_option("--assignment", attend.assignment, "Assignment CSV")->required();
  sa->add_option("--schedule", attend.schedule, "Schedule JSON (default: built from --window/--stride/--shift/--rounds)");
  add_schedule_opts(sa, attend.sched);
  sa->add_option("--K", attend.buckets, "Buckets per batch used to build the assignment")->check(CLI::PositiveNumber);
  sa->add_option("--S", attend.capacity, "Bucket capacity used to build the assignment")->check(CLI::PositiveNumber);
  sa->add_option("--heads", attend.heads, "Attention heads")->required()->check(CLI::PositiveNumber);
  sa->add_option("--tile-rows", attend.tile_rows, "Streaming tile height (multiple of 16)");
  sa->add_option("--precision", attend.precision, "Arithmetic")->check(CLI::IsMember({"double", "float"}));
  sa->add_option("--out", attend.out, "Output feature CSV");
  sa->add_option("--report", attend.report, "Equivalence report JSON ('-' = stdout)");

  StageCmd stage;
  auto* ss = app.add_subcommand("stage", "End-to-end stage: voxelize, bucket, scatter, attention rounds, optional pooling");
  add_cloud_opts(ss, stage.cloud);
  add_hash_opts(ss, stage.hash);
  add_schedule_opts(ss, stage.sched);
  ss->add_option("--voxel-size", stage.voxel_size, "World units per voxel")->required()->check(CLI::PositiveNumber);
  ss->add_option("--d-model", stage.d_model, "Feature width (multiple of 6 and of --heads)");
  ss->add_option("--heads", stage.heads, "Attention heads")->check(CLI::PositiveNumber);
  ss->add_option("--hidden", stage.hidden, "MLP hidden width (default 4 x d-model)");
  ss->add_option("--tile-rows", stage.tile_rows, "Streaming tile height (multiple of 16)");
  ss->add_option("--rho", stage.rho, "Pool after the rounds with this reduction factor (0 = off)");
  ss->add_option("--reduce", stage.reduce, "Pooling reduction")->check(CLI::IsMember({"sum", "mean", "min", "max"}));
  ss->add_flag("--check-reference", stage.check_reference, "Also run the dense attention path and report the error");
  ss->add_option("--out", stage.out, "Output feature CSV (scattered order)");
  ss->add_option("--assignment-out", stage.assignment_out, "Assignment CSV matching --out");
  ss->add_option("--trace", stage.trace, "Per-round scope trace JSON ('-' = stdout)");

  PoolCmd pool;
  auto* sp = app.add_subcommand("pool", "In-bucket pooling of a scattered feature array");
  sp->add_option("--features", pool.features, "Scattered feature CSV")->required();
  sp->add_option("--assignment", pool.assignment, "Assignment CSV")->required();
  sp->add_option("--coords", pool.coords, "Cloud (.xyz/.ply) in original point order")->required();
  sp->add_option("--K", pool.buckets, "Buckets per batch")->check(CLI::PositiveNumber);
  sp->add_option("--S", pool.capacity, "Bucket capacity")->check(CLI::PositiveNumber);
  sp->add_option("--rho", pool.rho, "Reduction factor")->check(CLI::Range(1, 1024));
  sp->add_option("--reduce", pool.reduce, "Reduction")->check(CLI::IsMember({"sum", "mean", "min", "max"}));
  sp->add_option("--out", pool.out, "Pooled feature CSV");
  sp->add_option("--assignment-out", pool.assignment_out, "Pooled assignment CSV");
  sp->add_option("--stats", pool.stats, "Stats JSON ('-' = stdout)");

  CostCmd cost;
  auto* sc = app.add_subcommand("cost", "Modeled (not measured) latency sweep");
  sc->add_option("--sizes", cost.sizes, "start:stop:step or comma list");
  sc->add_option("--pipeline", cost.pipeline, "Pipelines")->check(CLI::IsMember({"ptv3", "flash3d", "both"}));
  sc->add_option("--rates", cost.rates, "Machine model overrides, key=value")->allow_extra_args(false);
  sc->add_option("--d", cost.d, "Feature width")->check(CLI::PositiveNumber);
  sc->add_option("--rounds", cost.rounds, "Attention rounds");
  sc->add_option("--K", cost.buckets, "Buckets")->check(CLI::PositiveNumber);
  sc->add_option("--S", cost.capacity, "Bucket capacity")->check(CLI::PositiveNumber);
  sc->add_option("--precision", cost.precision, "Payload width")->check(CLI::IsMember({"half", "single"}));
  sc->add_flag("--json", cost.json_out, "Emit a JSON summary instead of CSV");
  sc->add_option("--out", cost.out, "Output path ('-' = stdout)");

  DemoCmd demo;
  auto* sd = app.add_subcommand("demo", "cloud -> bucket -> 2-round attention -> pool, with invariant checks");
  sd->add_option("--n", demo.n, "Points")->check(CLI::PositiveNumber);
  sd->add_option("--voxel-size", demo.voxel_size, "World units per voxel")->check(CLI::PositiveNumber);
  sd->add_option("--out-dir", demo.out_dir, "Artifact directory");
  sd->add_option("--d-model", demo.d_model, "Feature width");
  sd->add_option("--heads", demo.heads, "Attention heads")->check(CLI::PositiveNumber);
  sd->add_option("--rho", demo.rho, "Pooling factor")->check(CLI::Range(1, 1024));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return kExitUsage;
  }

  try {
    if (sb->parsed()) return cmd_bucket(bucket, g, out);
    if (sa->parsed()) return cmd_attend(attend, g, out, err);
    if (ss->parsed()) return cmd_stage(stage, g, out);
    if (sp->parsed()) return cmd_pool(pool, g, out);
    if (sc->parsed()) return cmd_cost(cost, out);
    if (sd->parsed()) return cmd_demo(demo, g, out);
  } catch (const IntegrityError& e) {
    print_error(err, e.kind(), e.what());
    return kExitIntegrity;
  } catch (const Error& e) {
    print_error(err, e.kind(), e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    print_error(err, "error", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace psh3d::cli
