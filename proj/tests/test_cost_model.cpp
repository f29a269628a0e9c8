#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace psh3d;

TEST(CostModel, Ptv3TermsMatchHandFormula) {
  for (double n : {1e3, 1e5, 6e5})
    for (std::size_t rounds : {1u, 4u}) {
      const auto got = model_ptv3(n, 64, rounds);
      const auto want = oracle::ptv3_cost(n, 64, static_cast<double>(rounds));
      EXPECT_DOUBLE_EQ(got.load.seconds, want.load);
      EXPECT_DOUBLE_EQ(got.shuffle.seconds, want.shuffle);
      EXPECT_DOUBLE_EQ(got.attention.seconds, want.attention);
      EXPECT_DOUBLE_EQ(got.writeback.seconds, want.writeback);
      EXPECT_DOUBLE_EQ(got.total_seconds(), want.total());
    }
}

TEST(CostModel, Flash3dTermsMatchHandFormula) {
  for (double n : {1e3, 1e5, 6e5}) {
    const auto got = model_flash3d(n, 32, 3, 256, 512);
    const auto want = oracle::flash3d_cost(n, 32, 3, 256);
    EXPECT_DOUBLE_EQ(got.shuffle.seconds, want.shuffle);
    EXPECT_DOUBLE_EQ(got.attention.seconds, want.attention);
    EXPECT_DOUBLE_EQ(got.ordering_seconds, want.ordering);
    EXPECT_DOUBLE_EQ(got.total_seconds(), want.total());
  }
}

TEST(CostModel, BytesCountHalfOrSinglePayloads) {
  MachineModel half, single;
  single.precision = Precision::Single;
  const auto h = model_flash3d(1000, 10, 2, 256, 512, half), s = model_flash3d(1000, 10, 2, 256, 512, single);
  EXPECT_DOUBLE_EQ(h.load.bytes, 1000 * 10 * 2.0);
  EXPECT_DOUBLE_EQ(s.total_bytes(), 2 * h.total_bytes());
  // load + one scatter + 2 rounds x 4 passes + writeback
  EXPECT_DOUBLE_EQ(h.total_bytes(), (1 + 1 + 8 + 1) * 1000 * 10 * 2.0);
}

TEST(CostModel, RatioAtSmallWidth) {
  // d = 3, one round: (n log2 n / 6e13 + 3n / 1e11) / (10 n / 6e13)
  const double n = 1e5;
  const double want = (n * std::log2(n) / 6e13 + 3 * n / 1e11) / ((10 * n + 256) / 6e13);
  EXPECT_NEAR(serialization_psh_ratio(model_ptv3(n, 3, 1), model_flash3d(n, 3, 1, 256, 512)), want, 1e-9 * want);
  EXPECT_GT(want, 100.0);
}

TEST(CostModel, RatesAreConfigurable) {
  MachineModel m;
  m.set("random_shuffle_rate", 1e12);
  EXPECT_EQ(m.random_shuffle_rate, 1e12);
  EXPECT_THROW(m.set("warp_rate", 1), ConfigError);
  m.flop_rate = 0;
  EXPECT_THROW(m.validate(), ConfigError);
  EXPECT_THROW(model_ptv3(0.5, 64, 1), ConfigError);
  EXPECT_THROW(model_flash3d(10, 64, 1, 0, 512), ConfigError);
}

TEST(SweepReport, OneRowPerSizeAndPipelineInOrder) {
  const std::vector<double> sizes{100, 200};
  const std::vector<Pipeline> both{Pipeline::Ptv3, Pipeline::Flash3d};
  std::istringstream in(sweep_report(sizes, both));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kSweepHeader);
  std::vector<std::string> tags;
  while (std::getline(in, line)) tags.push_back(line.substr(0, line.find(',', line.find(',') + 1)));
  EXPECT_EQ(tags, (std::vector<std::string>{"ptv3,100", "flash3d,100", "ptv3,200", "flash3d,200"}));
  EXPECT_THROW(sweep_report({}, both), ConfigError);
  EXPECT_THROW(sweep_report(sizes, {}), ConfigError);
}
