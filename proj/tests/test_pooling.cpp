#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace psh3d;

namespace {

std::vector<Vec3> random_tile(Rng& rng, std::size_t m) {
  std::vector<Vec3> c(m);
  const bool clumped = rng.uniform() < 0.5;
  for (auto& p : c)
    for (auto& x : p) x = clumped ? 0.5 + 0.01 * rng.normal() : rng.uniform();
  return c;
}

void expect_partition(const SubBucketAssignment& sub, std::size_t m, std::size_t rho) {
  ASSERT_EQ(sub.size(), m);
  EXPECT_EQ(sub.num_subbuckets, (m + rho - 1) / rho);
  const auto sizes = sub.sizes();
  std::size_t short_ones = 0, total = 0;
  for (auto s : sizes) {
    EXPECT_GE(s, 1u);
    EXPECT_LE(s, rho);
    short_ones += s < rho;
    total += s;
  }
  EXPECT_LE(short_ones, 1u);
  EXPECT_EQ(total, m);
}

}  // namespace

TEST(BuildSubbuckets, SizesAreRhoExceptOneRemainder) {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const std::size_t m = 1 + rng.below(1024);
    const std::size_t rho = 1 + rng.below(16);
    const auto sub = build_subbuckets(random_tile(rng, m), rho);
    expect_partition(sub, m, rho);
    EXPECT_NO_THROW(sub.validate());
  }
}

TEST(BuildSubbuckets, DuplicatePointsStillPartition) {
  const std::vector<Vec3> same(37, Vec3{0.2, 0.2, 0.2});
  expect_partition(build_subbuckets(same, 4), 37, 4);
}

TEST(BuildSubbuckets, SeparatedPairsStayTogether) {
  // Eight well separated pairs and rho = 2: each pair is one sub-bucket.
  std::vector<Vec3> c;
  for (int k = 0; k < 8; ++k) {
    const Vec3 base{static_cast<double>(k & 1), static_cast<double>((k >> 1) & 1), static_cast<double>(k >> 2)};
    c.push_back(base);
    c.push_back({base[0] + 1e-3, base[1], base[2]});
  }
  const auto sub = build_subbuckets(c, 2);
  for (int k = 0; k < 8; ++k) EXPECT_EQ(sub.subbucket_id[2 * k], sub.subbucket_id[2 * k + 1]) << k;
}

TEST(BuildSubbuckets, RejectsBadSizes) {
  EXPECT_THROW(build_subbuckets({}, 2), ConfigError);
  EXPECT_THROW(build_subbuckets(std::vector<Vec3>(1025), 2), ConfigError);
  EXPECT_THROW(build_subbuckets(std::vector<Vec3>(4), 0), ConfigError);
}

TEST(PoolFeatures, ReductionsMatchOracle) {
  Rng rng(2);
  const auto c = random_tile(rng, 90);
  const auto sub = build_subbuckets(c, 4);
  const auto f = fixtures::random_matrix(rng, 90, 5);
  for (auto r : {Reduce::Sum, Reduce::Mean, Reduce::Min, Reduce::Max}) {
    const auto got = pool_features(f, sub, r);
    for (std::size_t j = 0; j < sub.num_subbuckets; ++j)
      for (std::size_t k = 0; k < 5; ++k) {
        std::vector<double> vals;
        for (std::size_t i = 0; i < 90; ++i)
          if (static_cast<std::size_t>(sub.subbucket_id[i]) == j) vals.push_back(f(i, k));
        double want = 0;
        switch (r) {
          case Reduce::Sum: want = std::accumulate(vals.begin(), vals.end(), 0.0); break;
          case Reduce::Mean: want = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size(); break;
          case Reduce::Min: want = *std::min_element(vals.begin(), vals.end()); break;
          case Reduce::Max: want = *std::max_element(vals.begin(), vals.end()); break;
        }
        EXPECT_NEAR(got(j, k), want, 1e-12);
      }
  }
  EXPECT_THROW(parse_reduce("median"), ConfigError);
}

TEST(PoolStage, ConservesSumAndShrinksCounts) {
  Rng rng(3);
  auto in = fixtures::random_instance(rng, 6000, HashKind::ZorderDiv, 64, 512);
  const auto a = assign_buckets(in.voxels, in.batch, in.cfg, 512, default_probe_schedule());
  std::vector<Vec3> coords(6000);
  for (auto& p : coords) p = {rng.uniform(), rng.uniform(), rng.uniform()};
  const auto f = fixtures::random_matrix(rng, 6000, 3);
  for (std::size_t rho : {1u, 2u, 3u, 4u}) {
    const auto r = pool_stage(f, coords, a, rho, Reduce::Sum, 2);
    EXPECT_NO_THROW(r.assignment.validate());
    for (std::size_t s = 0; s < a.counts.size(); ++s)
      EXPECT_EQ(r.assignment.counts[s], (a.counts[s] + static_cast<std::int64_t>(rho) - 1) / static_cast<std::int64_t>(rho));
    for (std::size_t k = 0; k < 3; ++k) {
      double in_sum = 0, out_sum = 0;
      for (std::size_t i = 0; i < 6000; ++i) in_sum += f(i, k);
      for (std::size_t j = 0; j < r.features.rows(); ++j) out_sum += r.features(j, k);
      EXPECT_NEAR(out_sum, in_sum, 1e-9 * 6000);
    }
  }
}

TEST(PoolStage, ParentsStayInsideTheirBucket) {
  Rng rng(4);
  auto in = fixtures::random_instance(rng, 3000, HashKind::XorMod, 32, 256);
  const auto a = assign_buckets(in.voxels, in.batch, in.cfg, 256, default_probe_schedule());
  std::vector<Vec3> coords(3000);
  for (auto& p : coords) p = {rng.uniform(), rng.uniform(), rng.uniform()};
  const auto f = fixtures::random_matrix(rng, 3000, 2);
  const auto r = pool_stage(f, coords, a, 3, Reduce::Mean);
  std::vector<std::int64_t> row_slot(3000);
  for (std::size_t i = 0; i < 3000; ++i) row_slot[a.dest(i)] = a.bucket_id[i];
  for (std::size_t row = 0; row < 3000; ++row)
    EXPECT_EQ(r.assignment.bucket_id[r.parent[row]], row_slot[row]);
}

TEST(PoolStage, BucketsDoNotSeeEachOther) {
  Rng rng(5);
  auto in = fixtures::random_instance(rng, 2500, HashKind::ZorderDiv, 16, 256);
  const auto a = assign_buckets(in.voxels, in.batch, in.cfg, 256, default_probe_schedule());
  std::vector<Vec3> coords(2500);
  for (auto& p : coords) p = {rng.uniform(), rng.uniform(), rng.uniform()};
  const auto f = fixtures::random_matrix(rng, 2500, 4);
  const auto full = pool_stage(f, coords, a, 2, Reduce::Max);
  const std::size_t keep_slot = 3;
  auto zeroed = f;
  auto moved = coords;
  const auto lo = static_cast<std::size_t>(a.bucket_base[keep_slot]);
  const auto hi = lo + static_cast<std::size_t>(a.counts[keep_slot]);
  for (std::size_t i = 0; i < 2500; ++i)
    if (i < lo || i >= hi) {
      for (std::size_t k = 0; k < 4; ++k) zeroed(i, k) = 0;
      moved[i] = {9, 9, 9};
    }
  const auto part = pool_stage(zeroed, moved, a, 2, Reduce::Max);
  const auto plo = static_cast<std::size_t>(full.assignment.bucket_base[keep_slot]);
  for (std::size_t j = plo; j < plo + static_cast<std::size_t>(full.assignment.counts[keep_slot]); ++j)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(part.features(j, k), full.features(j, k));
}

TEST(PoolStage, TileRowsAreMultiplesOfRho) {
  EXPECT_EQ(pool_tile_rows(2), 1024u);
  EXPECT_EQ(pool_tile_rows(3), 1023u);
  EXPECT_EQ(pool_tile_rows(1000), 1000u);
  EXPECT_THROW(pool_tile_rows(0), ConfigError);
  EXPECT_THROW(pool_tile_rows(1025), ConfigError);
}
