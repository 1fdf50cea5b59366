#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result cli(const std::string& args) {
  static int n = 0;
  const fs::path log = fs::temp_directory_path() / ("beamsight_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
  const std::string cmd = std::string(BEAMSIGHT_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  fs::remove(log);
  return r;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("beamsight_cli_test_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Cli, ZeroImageCountIsAUsageError) {
  const auto r = cli("generate --n-hazard 0 --out " + scratch_dir("zero").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("counts must be positive"), std::string::npos) << r.out;
}

TEST(Cli, UnknownSubcommandIsAUsageError) { EXPECT_EQ(cli("frobnicate").code, 1); }

TEST(Cli, ManifestPreprocessEchoesTileCounts) {
  const fs::path out = scratch_dir("manifest");
  const auto r = cli("--out " + out.string() + " preprocess --group-by-source false --manifest " BEAMSIGHT_TEST_DATA
                     "/count_manifest.tsv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("hazard\t332\t266\t66"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("nonhazard\t664\t532\t132"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(out / "preprocess" / "config.json"));
  fs::remove_all(out);
}

TEST(Cli, MissingInputIsADataError) {
  const fs::path out = scratch_dir("missing");
  EXPECT_EQ(cli("--out " + out.string() + " stats --beam-map /nonexistent/map.json").code, 2);
  EXPECT_EQ(cli("--out " + out.string() + " train --corpus /nonexistent/corpus").code, 2);
  fs::remove_all(out);
}

TEST(Cli, MalformedConfigIsAUsageError) {
  const fs::path out = scratch_dir("badcfg");
  fs::create_directories(out);
  std::ofstream(out / "c.json") << R"({"seed": 1, "unexpected": true})";
  EXPECT_EQ(cli("--config " + (out / "c.json").string() + " selftest").code, 1);
  fs::remove_all(out);
}

TEST(Cli, DivergenceIsANumericFailure) {
  const fs::path out = scratch_dir("diverge");
  const std::string base = "--config " BEAMSIGHT_CONFIG_DIR "/smoke.json --out " + out.string();
  ASSERT_EQ(cli(base + " generate").code, 0);
  const auto r = cli(base + " train --lr 1e30");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("DivergedLoss"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(out / "train" / "last_finite.rfhd"));
  fs::remove_all(out);
}

TEST(Cli, FlagsOverrideConfigWithoutTouchingIt) {
  const fs::path out = scratch_dir("override");
  fs::create_directories(out);
  const fs::path cfg = out / "c.json";
  std::ofstream(cfg) << R"({"seed": 4, "stats": {"radius": 5.0}})";
  const auto before = fs::last_write_time(cfg);
  ASSERT_EQ(cli("--config " + cfg.string() + " --out " + out.string() + " --seed 8 stats --radius 9 --beam-map " +
                BEAMSIGHT_TEST_DATA "/example_beam_map.json")
                .code,
            0);
  std::ifstream in(out / "stats" / "config.json");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_NE(ss.str().find("\"seed\": 8"), std::string::npos);
  EXPECT_NE(ss.str().find("\"radius\": 9.0"), std::string::npos);
  EXPECT_EQ(fs::last_write_time(cfg), before);
  fs::remove_all(out);
}

TEST(Cli, SelftestReportsPassCount) {
  const fs::path out = scratch_dir("selftest");
  const auto r = cli("--out " + out.string() + " selftest");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("selftest: 15/15 passed"), std::string::npos) << r.out;
  fs::remove_all(out);
}
