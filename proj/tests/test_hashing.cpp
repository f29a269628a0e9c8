#include <gtest/gtest.h>

#include <map>
#include <set>

#include "oracles.hpp"

using namespace psh3d;

TEST(Morton, MatchesBitLoopOn64Cases) {
  Rng rng(2024);
  for (int t = 0; t < 64; ++t) {
    const unsigned bits = 1 + static_cast<unsigned>(rng.below(21));
    const std::int64_t lim = std::int64_t{1} << bits;
    const Voxel v{static_cast<std::int64_t>(rng.below(lim)), static_cast<std::int64_t>(rng.below(lim)),
                  static_cast<std::int64_t>(rng.below(lim))};
    EXPECT_EQ(morton_encode(v, bits), oracle::morton(v[0], v[1], v[2], bits)) << "bits " << bits;
  }
}

TEST(Morton, KnownCodes) {
  EXPECT_EQ(morton_encode({1, 0, 0}, 4), 1u);
  EXPECT_EQ(morton_encode({0, 1, 0}, 4), 2u);
  EXPECT_EQ(morton_encode({0, 0, 1}, 4), 4u);
  EXPECT_EQ(morton_encode({3, 3, 3}, 2), 63u);
  const std::int64_t top = (std::int64_t{1} << 21) - 1;
  EXPECT_EQ(morton_encode({top, top, top}, 21), (std::uint64_t{1} << 63) - 1);
}

TEST(Morton, OutOfRangeNamesTheAxis) {
  try {
    morton_encode({0, 16, 0}, 4);
    FAIL();
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("axis y"), std::string::npos);
  }
  EXPECT_THROW(morton_encode({0, 0, -1}, 4), RangeError);
  EXPECT_THROW(morton_encode({0, 0, 0}, 22), ConfigError);
}

TEST(HashBucket, AllKindsMatchOracle) {
  Rng rng(9);
  for (auto kind : {HashKind::XorMod, HashKind::XorDiv, HashKind::ZorderMod, HashKind::ZorderDiv}) {
    for (int t = 0; t < 500; ++t) {
      HashConfig cfg{kind, static_cast<std::uint32_t>(1 + rng.below(300)), 1 + rng.below(50), 8};
      const Voxel v{static_cast<std::int64_t>(rng.below(256)), static_cast<std::int64_t>(rng.below(256)),
                    static_cast<std::int64_t>(rng.below(256))};
      EXPECT_EQ(static_cast<std::int64_t>(hash_bucket(v, cfg)),
                oracle::bucket(v, kind, cfg.num_buckets, cfg.divisor, cfg.bits_per_axis));
    }
  }
}

TEST(HashBucket, NamesRoundTrip) {
  for (auto kind : {HashKind::XorMod, HashKind::XorDiv, HashKind::ZorderMod, HashKind::ZorderDiv})
    EXPECT_EQ(parse_hash_kind(to_string(kind)), kind);
  EXPECT_THROW(parse_hash_kind("morton"), ConfigError);
}

TEST(HashBucket, StrictDivRejectsLargeQuotients) {
  HashConfig cfg{HashKind::ZorderDiv, 4, 2, 4, true};
  EXPECT_EQ(hash_bucket({1, 1, 0}, cfg), 1u);      // code 3 -> 1
  EXPECT_THROW(hash_bucket({2, 0, 0}, cfg), RangeError);  // code 8 -> 4 >= K
  cfg.strict_div = false;
  EXPECT_EQ(hash_bucket({2, 0, 0}, cfg), 0u);
}

TEST(HashBucket, XorRejectsNegativeComponents) {
  HashConfig cfg{HashKind::XorMod, 8, 1, 10};
  EXPECT_THROW(hash_bucket({-1, 0, 0}, cfg), RangeError);
  EXPECT_FALSE(in_hash_domain({-1, 0, 0}, cfg));
  EXPECT_TRUE(in_hash_domain({5000, 0, 0}, cfg));
  cfg.kind = HashKind::ZorderMod;
  EXPECT_FALSE(in_hash_domain({1024, 0, 0}, cfg));
}

// On an aligned grid, zorder-div with divisor 8 maps each 2x2x2 block to
// one bucket: equal buckets iff equal block coordinates.
TEST(HashBucket, ZorderDivGroupsAlignedBlocks) {
  HashConfig cfg{HashKind::ZorderDiv, 512, 8, 4};
  std::map<std::uint32_t, std::set<Voxel>> members;
  for (std::int64_t x = 0; x < 16; ++x)
    for (std::int64_t y = 0; y < 16; ++y)
      for (std::int64_t z = 0; z < 16; ++z) members[hash_bucket({x, y, z}, cfg)].insert({x, y, z});
  EXPECT_EQ(members.size(), 512u);
  for (const auto& [b, vs] : members) {
    ASSERT_EQ(vs.size(), 8u);
    const auto first = *vs.begin();
    for (const auto& v : vs)
      for (int a = 0; a < 3; ++a) EXPECT_EQ(v[a] / 2, first[a] / 2);
  }
}

// Neighbouring voxels land in the same or a nearby bucket far more often
// under zorder-div than under xor-mod.
TEST(HashBucket, ZorderDivKeepsNeighboursCloser) {
  HashConfig z{HashKind::ZorderDiv, 512, 8, 4}, x{HashKind::XorMod, 512, 1, 4};
  int same_z = 0, same_x = 0;
  for (std::int64_t a = 0; a < 15; ++a)
    for (std::int64_t b = 0; b < 16; ++b)
      for (std::int64_t c = 0; c < 16; ++c) {
        same_z += hash_bucket({a, b, c}, z) == hash_bucket({a + 1, b, c}, z);
        same_x += hash_bucket({a, b, c}, x) == hash_bucket({a + 1, b, c}, x);
      }
  EXPECT_GT(same_z, 0);
  EXPECT_EQ(same_x, 0);  // xor of distinct values never collides on one axis
}

TEST(Remap, MakesEveryBatchStartAtZero) {
  const std::vector<Voxel> v{{-3, 5, 2}, {-1, 7, 2}, {10, -4, 0}, {12, -4, 3}};
  const std::vector<std::int32_t> b{0, 0, 1, 1};
  const auto r = remap_per_batch(v, b);
  EXPECT_EQ(r, (std::vector<Voxel>{{0, 0, 0}, {2, 2, 0}, {0, 0, 0}, {2, 0, 3}}));
}

TEST(AutoDivisor, IsTheSmallestDivisorAvoidingWrap) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    std::vector<Voxel> vox;
    for (int i = 0; i < 50; ++i)
      vox.push_back({static_cast<std::int64_t>(rng.below(200)), static_cast<std::int64_t>(rng.below(200)),
                     static_cast<std::int64_t>(rng.below(200))});
    HashConfig cfg{t % 2 ? HashKind::ZorderDiv : HashKind::XorDiv, static_cast<std::uint32_t>(1 + rng.below(512)), 1,
                   8};
    cfg.divisor = auto_divisor(vox, cfg);
    std::uint64_t hi = 0;
    for (const auto& v : vox) {
      hi = std::max(hi, hash_key(v, cfg));
      EXPECT_LT(hash_key(v, cfg) / cfg.divisor, cfg.num_buckets);
    }
    if (cfg.divisor > 1) {
      EXPECT_GE(hi / (cfg.divisor - 1), cfg.num_buckets);
    }
  }
}
