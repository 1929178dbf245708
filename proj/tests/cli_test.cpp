#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "imi/pipeline.hpp"
#include "imi/trajectory.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result imi(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" IMI_CLI "' " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  char buf[4096];
  while (p && fgets(buf, sizeof buf, p)) r.out += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string s;
  std::getline(in, s);
  return s;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("imi_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

TEST_F(Cli, SynthWritesAndRefusesToOverwrite) {
  const Result a = imi(dir, "synth -o xi0.csv");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("infeasible"), std::string::npos);
  const imi::Trajectory t = imi::load_trajectory((dir / "xi0.csv").string());
  EXPECT_EQ(t.meta().source, "synthetic");

  const Result b = imi(dir, "synth -o xi0.csv --flight 0.6");
  EXPECT_EQ(b.code, 2);
  EXPECT_NE(b.out.find("--force"), std::string::npos);
  EXPECT_EQ(imi::load_trajectory((dir / "xi0.csv").string()).size(), t.size());

  EXPECT_EQ(imi(dir, "synth -o xi0.csv --flight 0.6 --force").code, 0);
  EXPECT_LT(imi::load_trajectory((dir / "xi0.csv").string()).size(), t.size());
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(imi(dir, "synth -o a.csv --flight 0").code, 2);
  EXPECT_FALSE(fs::exists(dir / "a.csv"));
  EXPECT_EQ(imi(dir, "").code, 2);
  EXPECT_EQ(imi(dir, "frobnicate").code, 2);
  EXPECT_EQ(imi(dir, "--profile huge config").code, 2);
  EXPECT_EQ(imi(dir, "--help").code, 0);
  EXPECT_EQ(imi(dir, "train --ref missing.csv").code, 2);
}

TEST_F(Cli, ConfigErrorsNameThePath) {
  std::ofstream(dir / "bad.json") << R"({"ppo": {"learning_rat": 0.1}})";
  const Result r = imi(dir, "--config bad.json config");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("$.ppo.learning_rat"), std::string::npos) << r.out;

  std::ofstream(dir / "ok.json") << R"({"seed": 7, "ppo": {"updates": 3}})";
  const Result ok = imi(dir, "--config ok.json --envs 5 config");
  ASSERT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("\"seed\": 7"), std::string::npos);
  EXPECT_NE(ok.out.find("\"num_envs\": 5"), std::string::npos);
  EXPECT_NE(ok.out.find("\"updates\": 3"), std::string::npos);
}

TEST_F(Cli, TrainRolloutAndTools) {
  ASSERT_EQ(imi(dir, "synth -o xi0.csv").code, 0);
  const Result tr = imi(dir, "--profile smoke --out-dir run -q train --ref xi0.csv");
  ASSERT_EQ(tr.code, 0) << tr.out;
  for (const char* p : {"run/checkpoints/pi1.json", "run/logs/pi1.csv", "run/manifests/pi1.json",
                        "run/eval/pi1.csv", "run/refs/xi0.csv", "run/refs/xi1_rollout.csv"}) {
    EXPECT_TRUE(fs::exists(dir / p)) << p;
  }
  const imi::IterationManifest m = imi::read_manifest(dir / "run/manifests/pi1.json");
  EXPECT_EQ(m.updates_done, 20);

  // Exit 4 flags a rollout that ended by a constraint; the file is kept either way.
  const Result ro = imi(dir, "rollout --checkpoint run/checkpoints/pi1.json --ref xi0.csv -o r.csv");
  EXPECT_TRUE(ro.code == 0 || ro.code == 4) << ro.out;
  ASSERT_TRUE(fs::exists(dir / "r.csv"));
  EXPECT_EQ(imi::load_trajectory((dir / "r.csv").string()).meta().parent, "xi0");

  EXPECT_EQ(imi(dir, "trim -i xi0.csv -o t.csv --begin 2 --end 10").code, 0);
  EXPECT_EQ(imi::load_trajectory((dir / "t.csv").string()).size(), 8u);
  EXPECT_EQ(imi(dir, "trim -i xi0.csv -o t2.csv --begin 10 --end 2").code, 2);
  EXPECT_EQ(imi(dir, "trim -i xi0.csv -o t3.csv --auto-start 0.5").code, 0);
  EXPECT_EQ(imi(dir, "translate -i t.csv -o tl.csv --dx 1.5").code, 0);
  EXPECT_NEAR(imi::load_trajectory((dir / "tl.csv").string())[0].base_x,
              imi::load_trajectory((dir / "t.csv").string())[0].base_x + 1.5, 1e-9);

  const Result ev = imi(dir, "--profile smoke eval --checkpoint run/checkpoints/pi1.json --ref xi0.csv "
                          "--episodes 4 -o e.csv");
  ASSERT_EQ(ev.code, 0) << ev.out;
  EXPECT_EQ(first_line(dir / "e.csv"), imi::eval_csv_header());

  const Result cmp = imi(dir, "compare xi0.csv t.csv -o c.csv");
  ASSERT_EQ(cmp.code, 0) << cmp.out;
  EXPECT_EQ(first_line(dir / "c.csv"), imi::compare_csv_header());
  EXPECT_EQ(imi(dir, "compare xi0.csv").code, 2);
}

TEST_F(Cli, ImiRunWritesLineageAndGrid) {
  const Result r = imi(dir, "--profile smoke --out-dir run -q imi-run --flip-up");
  // Smoke budgets rarely produce a promotable rollout: exit 0 or 4.
  ASSERT_TRUE(r.code == 0 || r.code == 4) << r.out;
  EXPECT_TRUE(fs::exists(dir / "run/config.json"));
  EXPECT_TRUE(fs::exists(dir / "run/manifests/pi1.json"));
  ASSERT_TRUE(fs::exists(dir / "run/eval/flipup.csv"));
  std::ifstream grid(dir / "run/eval/flipup.csv");
  std::string line;
  int rows = 0;
  std::getline(grid, line);
  EXPECT_EQ(line, "reference,box,box_height,success_rate,mean_return,status");
  while (std::getline(grid, line)) ++rows;
  EXPECT_GE(rows, 2);
  EXPECT_EQ(rows % 2, 0);
}

}  // namespace
