// Copyright 2026 The pvcam Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "pvcam/cli.hpp"
#include "support.hpp"

namespace pvcam::cli {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

int manifests_in(const fs::path& dir) {
  int count = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().find("manifest") != std::string::npos) ++count;
  return count;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("pvcam_cli_" + std::to_string(::getpid()) + "_" +
                                         ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  static Config small() {
    Config c;
    c.set("n", "4");
    c.set("T", "60");
    c.set("K0", "5");
    c.set("K", "5");
    c.set("threshold", "0.3");
    return c;
  }

  fs::path root_;
};

TEST(Config, DefaultsFileAndOverridePrecedence) {
  Config c;
  EXPECT_EQ(c.str("mode"), "correct");
  EXPECT_EQ(c.int_list("T_values"), (std::vector<int>{100, 200, 400}));
  EXPECT_FALSE(c.optional_int("K0"));
  c.merge({{"seed", "11"}, {"mode", "overfit"}});
  c.set("mode", "underfit");
  EXPECT_EQ(c.unsigned64("seed"), 11u);
  EXPECT_EQ(pipeline_options(c).mode, FitMode::underfit);
  EXPECT_THROW(c.set("nonsense", "1"), ConfigError);
  c.set("refine", "maybe");
  EXPECT_THROW(c.boolean("refine"), ConfigError);
  c.set("mode", "sideways");
  EXPECT_THROW(pipeline_options(c), ConfigError);
  const std::string text = Config().render();
  EXPECT_EQ(text.substr(0, text.find('\n')), "seed = 20240601");
}

TEST(Config, ThresholdAndKnotKeys) {
  Config c;
  EXPECT_FALSE(pipeline_options(c).threshold);
  c.set("threshold", "0.25");
  c.set("K0", "6");
  c.set("K", "8");
  const auto o = pipeline_options(c);
  EXPECT_EQ(*o.threshold, 0.25);
  EXPECT_EQ(*o.K0, 6);
  EXPECT_EQ(*o.K, 8);
}

TEST_F(CliTest, SimulateWritesPanelPartitionsAndOneManifest) {
  const Config c = small();
  cmd_simulate(c, root_.string());
  const auto panel = lines(root_ / "panel.csv");
  EXPECT_EQ(panel.size(), 4u * 60u + 1u);
  EXPECT_EQ(panel.front(), "cluster_id,t,u,y,x1");
  EXPECT_EQ(lines(root_ / "partitions_true.csv").size(), 1u + 2u * 8u);
  EXPECT_EQ(manifests_in(root_), 1);
  const std::string manifest = slurp(root_ / kManifestName);
  EXPECT_NE(manifest.find("command: simulate"), std::string::npos);
  EXPECT_NE(manifest.find(sha256_file((root_ / "panel.csv").string()) + "  panel.csv"), std::string::npos);

  const fs::path again = root_ / "again";
  cmd_simulate(c, again.string());
  EXPECT_EQ(slurp(root_ / "panel.csv"), slurp(again / "panel.csv"));
  Config other = c;
  other.set("replication", "1");
  cmd_simulate(other, (root_ / "other").string());
  EXPECT_NE(slurp(root_ / "panel.csv"), slurp(root_ / "other" / "panel.csv"));
}

TEST_F(CliTest, Sha256KnownVector) {
  std::ofstream(root_ / "abc.txt", std::ios::binary) << "abc";
  EXPECT_EQ(sha256_file((root_ / "abc.txt").string()),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_F(CliTest, FitIdentifyEvaluatePredict) {
  Config c = small();
  cmd_simulate(c, (root_ / "sim").string());
  const std::string data = (root_ / "sim" / "panel.csv").string();

  cmd_fit(c, data, (root_ / "fit").string());
  for (const char* f : {"model.json", "partitions.csv", "functions.csv", "variances.csv", "config.txt", "manifest.txt"})
    EXPECT_TRUE(fs::exists(root_ / "fit" / f)) << f;
  EXPECT_EQ(manifests_in(root_ / "fit"), 1);
  EXPECT_EQ(lines(root_ / "fit" / "variances.csv").front(), "sigma2,sigma_eta2,converged,iterations");

  cmd_identify(c, data, (root_ / "id").string());
  EXPECT_TRUE(fs::exists(root_ / "id" / "partitions_greedy.csv"));

  cmd_evaluate(c, (root_ / "sim" / "partitions_true.csv").string(), (root_ / "sim" / "partitions_true.csv").string(),
               (root_ / "eval").string());
  const auto nmi = lines(root_ / "eval" / "nmi.csv");
  ASSERT_EQ(nmi.size(), 3u);
  EXPECT_EQ(nmi[0], "family,blocks_estimate,blocks_reference,nmi");
  EXPECT_EQ(nmi[1], "coef,3,3,1.0000");

  cmd_predict(c, (root_ / "fit").string(), data, 0, (root_ / "pred0").string());
  EXPECT_EQ(lines(root_ / "pred0" / "fitted.csv").size(), 1u + 4u * 59u);
  EXPECT_FALSE(fs::exists(root_ / "pred0" / "pe.csv"));

  cmd_predict(c, (root_ / "fit").string(), data, 2, (root_ / "pred2").string());
  const auto pe = lines(root_ / "pred2" / "pe.csv");
  ASSERT_EQ(pe.size(), 6u);
  EXPECT_EQ(pe.back().substr(0, 4), "all,");
  const auto value = pe.back().substr(4);
  EXPECT_EQ(value.size() - value.find('.') - 1, 4u);

  EXPECT_THROW(cmd_predict(c, (root_ / "missing").string(), data, 0, (root_ / "p").string()), DataError);
  EXPECT_THROW(cmd_predict(c, (root_ / "fit").string(), data, -1, (root_ / "p").string()), ConfigError);
}

TEST_F(CliTest, FitModesChangeThePartitions) {
  Config c = small();
  cmd_simulate(c, (root_ / "sim").string());
  c.set("mode", "overfit");
  cmd_fit(c, (root_ / "sim" / "panel.csv").string(), (root_ / "over").string());
  const auto parts = io::read_partitions((root_ / "over" / "partitions.csv").string());
  EXPECT_EQ(parts.first.num_blocks(), 8);
  EXPECT_EQ(parts.second.num_blocks(), 8);
}

TEST_F(CliTest, ReproduceIsDeterministic) {
  Config c = small();
  c.set("replications", "2");
  c.set("T_values", "40,60");
  cmd_reproduce(c, (root_ / "a").string());
  cmd_reproduce(c, (root_ / "b").string());
  for (const char* f : {"table_nmi.csv", "table_mise.csv", "replications.csv"})
    EXPECT_EQ(slurp(root_ / "a" / f), slurp(root_ / "b" / f)) << f;
  EXPECT_EQ(lines(root_ / "a" / "table_mise.csv").front(), "function,method,T=40,T=60");
  EXPECT_EQ(lines(root_ / "a" / "replications.csv").size(), 1u + 4u);
  EXPECT_EQ(manifests_in(root_ / "a"), 1);
}

TEST_F(CliTest, ReproduceSmokeRunIsFast) {
  Config c;
  c.set("replications", "5");
  c.set("T_values", "100");
  const auto start = std::chrono::steady_clock::now();
  cmd_reproduce(c, root_.string());
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 60.0);
  const auto nmi = lines(root_ / "table_nmi.csv");
  EXPECT_EQ(nmi.front(), "family,identification,n,T=100");
}

// ---------------------------------------------------------------------------
// Executable: exit codes

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PVCAM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST_F(CliTest, ExitCodes) {
  const auto log = root_ / "log.txt";
  EXPECT_EQ(run("--print-config", log), 0);
  EXPECT_EQ(lines(log).front(), "seed = 20240601");
  EXPECT_EQ(run("fit --print-config --seed 5 --set mode=overfit", log), 0);
  EXPECT_NE(slurp(log).find("mode = overfit"), std::string::npos);
  EXPECT_EQ(run("--bogus", log), 1);
  EXPECT_EQ(run("", log), 1);
  EXPECT_EQ(run("fit", log), 1);
  EXPECT_EQ(run("simulate --set nonsense=1", log), 1);
  EXPECT_EQ(run("fit --data " + (root_ / "nope.csv").string() + " --out " + (root_ / "o").string(), log), 2);
  std::ofstream(root_ / "bad.csv") << "cluster_id,t,y,x1\na,1,zz,1\n";
  EXPECT_EQ(run("fit --data " + (root_ / "bad.csv").string() + " --out " + (root_ / "o").string(), log), 2);
  EXPECT_NE(slurp(log).find("column 'y' at row 2"), std::string::npos);
  // A covariate constant within a panel with ridge 0 gives singular systems.
  std::ofstream flat(root_ / "flat.csv");
  flat << "cluster_id,t,y,x1\n";
  for (int i = 0; i < 2; ++i)
    for (int t = 1; t <= 30; ++t) flat << "k" << i << ',' << t << ',' << (t * 7 % 11) / 10.0 << ',' << (t <= 15 ? 0 : 1) << '\n';
  flat.close();
  EXPECT_EQ(run("fit --data " + (root_ / "flat.csv").string() + " --set p=0 --set K0=5 --set K=5 --set ridge=0 --set mode=underfit --out " +
                    (root_ / "o").string(),
                log),
            3)
      << slurp(log);
  EXPECT_EQ(run("simulate --set n=4 --set T=20 --seed 9 --out " + (root_ / "s").string(), log), 0);
  EXPECT_EQ(lines(root_ / "s" / "panel.csv").size(), 81u);
}

}  // namespace
}  // namespace pvcam::cli
