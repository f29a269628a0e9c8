#include <gtest/gtest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "fixtures.hpp"

using namespace psh3d;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
  json err_json() const { return json::parse(err.substr(0, err.find('\n'))); }
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "psh3d");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("psh3d_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    cloud_ = path("cloud.xyz");
    std::ofstream(cloud_) << format_xyz(synth_cloud(4, 3000, CloudDistribution::GaussianClusters));
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const char* name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string cloud_;
};

}  // namespace

TEST_F(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_NE(r.out.find("bucket"), std::string::npos);
  EXPECT_EQ(run({"cost", "--help"}).code, cli::kExitOk);
}

TEST_F(Cli, UsageErrorsAreStructured) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"frobnicate"}, {"bucket", "--synth", "10"}, {"cost", "--pipeline", "ptv4"}, {"bucket", "--bogus"}}) {
    const auto r = run(args);
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_EQ(r.err_json()["error"]["kind"], "usage");
  }
}

TEST_F(Cli, BucketWritesCsvAndSummary) {
  const auto r = run({"bucket", "--in", cloud_, "--voxel-size", "0.05", "--K", "32", "--S", "128", "--out-csv",
                      path("a.csv"), "--schedule-out", path("s.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["n"], 3000);
  EXPECT_EQ(j["counts"].size(), 33u);
  EXPECT_EQ(j["invariants"]["bijection"], true);
  EXPECT_LT(j["locality"]["ratio"].get<double>(), 1.0);
  const auto a = load_assignment_csv(path("a.csv"), 32, 128);
  EXPECT_EQ(a.recycle_count(), j["recycle_count"].get<std::int64_t>());
  const auto s = json::parse(slurp(path("s.json")));
  EXPECT_EQ(s["rounds"].size(), 2u);
}

TEST_F(Cli, BucketErrorsMapToKinds) {
  auto r = run({"bucket", "--voxel-size", "0.05"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_EQ(r.err_json()["error"]["kind"], "config");
  r = run({"bucket", "--in", path("missing.xyz"), "--voxel-size", "0.05"});
  EXPECT_EQ(r.err_json()["error"]["kind"], "parse");
  std::ofstream(path("bad.xyz")) << "0 0 0\n1 1\n";
  r = run({"bucket", "--in", path("bad.xyz"), "--voxel-size", "0.05"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err_json()["error"]["message"].get<std::string>().find("line 2"), std::string::npos);
  r = run({"bucket", "--in", cloud_, "--voxel-size", "0.01", "--hash", "zorder-div", "--S-div", "1", "--strict-div",
           "--out-csv", path("a.csv")});
  EXPECT_EQ(r.err_json()["error"]["kind"], "range");
  std::ofstream(path("empty.xyz")) << "# nothing\n";
  r = run({"bucket", "--in", path("empty.xyz"), "--voxel-size", "0.05"});
  EXPECT_EQ(r.err_json()["error"]["kind"], "empty-input");
}

TEST_F(Cli, ConfigFileSetsOptionsAndRejectsUnknownKeys) {
  std::ofstream(path("ok.ini")) << "seed=3\n[bucket]\nvoxel-size=0.05\nsynth=500\nout-csv=" << path("a.csv") << "\n";
  auto r = run({"--config", path("ok.ini"), "bucket"});
  EXPECT_EQ(r.code, 0) << r.err;
  std::ofstream(path("bad.ini")) << "seed=3\nwarp_factor=9\n";
  r = run({"--config", path("bad.ini"), "cost"});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(Cli, TwoStageFlagGivesTheSameAssignment) {
  ASSERT_EQ(run({"bucket", "--in", cloud_, "--voxel-size", "0.02", "--K", "64", "--S", "32", "--out-csv",
                 path("one.csv"), "--out-json", path("one.json")})
                .code,
            0);
  ASSERT_EQ(run({"bucket", "--in", cloud_, "--voxel-size", "0.02", "--K", "64", "--S", "32", "--two-stage",
                 "--block-size", "100", "--out-csv", path("two.csv"), "--out-json", path("two.json")})
                .code,
            0);
  EXPECT_EQ(slurp(path("one.csv")), slurp(path("two.csv")));
}

TEST_F(Cli, AttendMatchesReferenceWithoutGatherCopies) {
  ASSERT_EQ(run({"bucket", "--in", cloud_, "--voxel-size", "0.05", "--K", "32", "--S", "64", "--out-csv",
                 path("a.csv"), "--out-json", path("sum.json"), "--schedule-out", path("s.json"), "--window", "3",
                 "--shift", "1", "--rounds", "3"})
                .code,
            0);
  Rng rng(1);
  std::ofstream(path("f.csv")) << format_matrix_csv(fixtures::random_matrix(rng, 3000, 8));
  for (const char* precision : {"double", "float"}) {
    const auto r = run({"attend", "--features", path("f.csv"), "--assignment", path("a.csv"), "--K", "32", "--S", "64",
                        "--schedule", path("s.json"), "--heads", "2", "--precision", precision, "--out",
                        path("o.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["gather_feature_bytes"], 0);
    EXPECT_LT(j["max_relative_error"].get<double>(), std::string(precision) == "float" ? 1e-5 : 1e-12);
    EXPECT_EQ(j["rounds"].size(), 3u);
    EXPECT_EQ(load_matrix_csv(path("o.csv")).rows(), 3000u);
  }
  auto r = run({"attend", "--features", path("f.csv"), "--assignment", path("a.csv"), "--K", "32", "--S", "60",
                "--heads", "2"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  r = run({"attend", "--features", path("f.csv"), "--assignment", path("a.csv"), "--K", "32", "--S", "64", "--heads",
           "3"});
  EXPECT_EQ(r.err_json()["error"]["kind"], "config");
}

TEST_F(Cli, StageAndPoolPipeline) {
  auto r = run({"stage", "--in", cloud_, "--voxel-size", "0.05", "--K", "32", "--S", "64", "--d-model", "12",
                "--heads", "3", "--check-reference", "--out", path("st.csv"), "--assignment-out", path("st_a.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto trace = json::parse(r.out);
  EXPECT_LT(trace["reference_relative_error"].get<double>(), 1e-12);
  EXPECT_EQ(trace["gather_feature_bytes"], 0);
  EXPECT_EQ(trace["rounds"].size(), 2u);

  r = run({"pool", "--features", path("st.csv"), "--assignment", path("st_a.csv"), "--K", "32", "--S", "64",
           "--coords", cloud_, "--rho", "4", "--reduce", "sum", "--out", path("p.csv"), "--assignment-out",
           path("p_a.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto stats = json::parse(r.out);
  EXPECT_LT(stats["locality"]["ratio"].get<double>(), 1.0);
  const auto in = load_matrix_csv(path("st.csv")), out = load_matrix_csv(path("p.csv"));
  double a = 0, b = 0;
  for (double x : in.values()) a += x;
  for (double x : out.values()) b += x;
  EXPECT_NEAR(a, b, 1e-9 * std::abs(a) + 1e-9);
  EXPECT_NO_THROW(load_assignment_csv(path("p_a.csv"), 32, 16));

  r = run({"stage", "--in", cloud_, "--voxel-size", "0.05", "--S", "50"});
  EXPECT_EQ(r.err_json()["error"]["kind"], "config");
}

TEST_F(Cli, StageWithPoolingInline) {
  const auto r = run({"stage", "--in", cloud_, "--voxel-size", "0.05", "--K", "32", "--S", "64", "--d-model", "6",
                      "--heads", "1", "--rho", "2", "--out", path("st.csv"), "--assignment-out", path("a.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = load_matrix_csv(path("st.csv")).rows();
  EXPECT_GE(rows, 1500u);
  EXPECT_LT(rows, 3000u);
  EXPECT_EQ(load_assignment_csv(path("a.csv"), 32, 32).size(), rows);
}

TEST_F(Cli, CorruptAssignmentIsAnIntegrityFailure) {
  ASSERT_EQ(run({"bucket", "--in", cloud_, "--voxel-size", "0.05", "--K", "32", "--S", "128", "--out-csv",
                 path("a.csv"), "--out-json", path("s.json")})
                .code,
            0);
  auto text = slurp(path("a.csv"));
  const auto last = text.rfind(',', text.size() - 2);
  text = text.substr(0, last + 1) + "99999\n";
  std::ofstream(path("a.csv"), std::ios::trunc) << text;
  Rng rng(2);
  std::ofstream(path("f.csv")) << format_matrix_csv(fixtures::random_matrix(rng, 3000, 4));
  const auto r = run({"pool", "--features", path("f.csv"), "--assignment", path("a.csv"), "--K", "32", "--S", "128",
                      "--coords", cloud_});
  EXPECT_EQ(r.code, cli::kExitIntegrity);
  EXPECT_EQ(r.err_json()["error"]["kind"], "integrity");
}

TEST_F(Cli, CostCsvAndJson) {
  auto r = run({"cost", "--sizes", "100000:600000:100000"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 13);
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), kSweepHeader);
  r = run({"cost", "--sizes", "1e5,2e5", "--pipeline", "flash3d", "--json", "--rates", "flop_rate=1e14", "--rates",
           "sort_constant=2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["rows"].size(), 2u);
  EXPECT_EQ(j["machine"]["flop_rate"], 1e14);
  EXPECT_EQ(j["modeled"], true);
  EXPECT_EQ(run({"cost", "--rates", "flop_rate"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"cost", "--rates", "tensor_rate=1"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"cost", "--sizes", "5:1:x"}).code, cli::kExitUsage);
}

TEST_F(Cli, DemoIsDeterministicAcrossThreads) {
  const auto a = run({"--seed", "7", "demo", "--n", "4000", "--out-dir", path("d1")});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run({"--seed", "7", "--threads", "3", "demo", "--n", "4000", "--out-dir", path("d2")});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out.substr(0, a.out.rfind("artifacts")), b.out.substr(0, b.out.rfind("artifacts")));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(path("d1"))) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "d2" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 6u);
  EXPECT_NE(a.out.find("check two_stage_counts_match: ok"), std::string::npos);
}
