#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "pcfg/workload.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

// Runs the CLI with stderr folded away unless asked for.
Run pcfg_cli(const std::string& args, bool with_stderr = false) {
  std::string cmd = std::string(PCFG_CLI) + " " + args +
                    (with_stderr ? " 2>&1" : " 2>/dev/null");
  FILE* p = popen(cmd.c_str(), "r");
  Run r{-1, {}};
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pcfg_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& leaf) const { return (dir_ / leaf).string(); }

  std::string gen(const std::string& family, const std::string& extra = "") {
    auto out = path(family);
    auto r = pcfg_cli("gen " + family + " --seed 3 --out " + out + " " + extra);
    EXPECT_EQ(r.code, 0) << r.out;
    return out;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenWritesBothFiles) {
  auto r = pcfg_cli("gen jump-table --seed 1 --entries=6 --out " + path("jt"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("image.pcfg"), std::string::npos);
  EXPECT_NE(r.out.find("truth.json"), std::string::npos);
  auto t = pcfg::read_truth_file(path("jt/truth.json"));
  ASSERT_EQ(t.jump_table_sizes.size(), 1u);
  EXPECT_EQ(t.jump_table_sizes.begin()->second, 6u);
}

TEST_F(Cli, GenRejectsBadSpecs) {
  EXPECT_EQ(pcfg_cli("gen big-random --functions=100001 --out " + path("x")).code, 1);
  EXPECT_EQ(pcfg_cli("gen nope --out " + path("x")).code, 1);
  EXPECT_EQ(pcfg_cli("gen shared-code --sharers=abc --out " + path("x")).code, 1);
  EXPECT_FALSE(fs::exists(path("x")));
}

TEST_F(Cli, AnalyzeIsThreadIndependent) {
  auto d = gen("big-random", "--functions=300");
  auto a = pcfg_cli("analyze " + d + "/image.pcfg --threads 1");
  auto b = pcfg_cli("analyze " + d + "/image.pcfg --threads 8");
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(b.code, 0);
  EXPECT_FALSE(a.out.empty());
  EXPECT_EQ(a.out, b.out);
}

TEST_F(Cli, AnalyzeFormatsAndSummary) {
  auto d = gen("jump-table");
  auto r = pcfg_cli("analyze " + d + "/image.pcfg --format dot --out " + path("g.dot"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("functions "), std::string::npos);
  EXPECT_NE(r.out.find("tables_trimmed 0"), std::string::npos);
  std::ifstream dot(path("g.dot"));
  std::string first;
  std::getline(dot, first);
  EXPECT_EQ(first.rfind("digraph", 0), 0u);

  r = pcfg_cli("analyze " + d + "/image.pcfg --format json");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("\"jump_tables\""), std::string::npos);
  EXPECT_EQ(pcfg_cli("analyze " + d + "/image.pcfg --format xml").code, 2);
}

TEST_F(Cli, AnalyzeErrors) {
  {
    std::ofstream bad(path("bad.pcfg"), std::ios::binary);
    bad << "NOPE0000000000000000000000000000";
  }
  auto r = pcfg_cli("analyze " + path("bad.pcfg"), true);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("error"), std::string::npos);
  EXPECT_EQ(pcfg_cli("analyze " + path("missing.pcfg")).code, 2);
  EXPECT_EQ(pcfg_cli("analyze").code, 2);
  EXPECT_EQ(pcfg_cli("").code, 2);
}

TEST_F(Cli, VerifyPipeline) {
  for (std::string fam : {"shared-code", "noreturn-chain", "tailcall-ambiguous",
                          "jump-table-overapprox", "outlined-cold"}) {
    auto d = gen(fam);
    auto r = pcfg_cli("verify " + d + "/image.pcfg --truth " + d + "/truth.json --threads 4");
    EXPECT_EQ(r.code, 0) << fam << "\n" << r.out;
    std::istringstream lines(r.out);
    int pass = 0;
    for (std::string l; std::getline(lines, l);) pass += l.rfind("PASS ", 0) == 0;
    EXPECT_EQ(pass, 4) << fam;
  }
}

TEST_F(Cli, VerifyReportsPerturbedTruth) {
  auto d = gen("jump-table");
  auto t = pcfg::read_truth_file(d + "/truth.json");
  auto base = t.jump_table_sizes.begin()->first;
  t.jump_table_sizes[base] += 3;
  {
    std::ofstream out(path("bad.json"));
    out << pcfg::truth_to_json(t);
  }
  auto r = pcfg_cli("verify " + d + "/image.pcfg --truth " + path("bad.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL jump table sizes"), std::string::npos);
  EXPECT_NE(r.out.find(pcfg::hex(base)), std::string::npos);
  EXPECT_NE(r.out.find("PASS function ranges"), std::string::npos);
}

TEST_F(Cli, VerifyMissingInputs) {
  auto d = gen("shared-code");
  EXPECT_EQ(pcfg_cli("verify " + d + "/image.pcfg --truth " + path("none.json")).code, 2);
  EXPECT_EQ(pcfg_cli("verify " + d + "/image.pcfg").code, 2);
}

TEST_F(Cli, BenchSingleLevel) {
  auto d = gen("big-random", "--functions=100");
  auto r = pcfg_cli("bench " + d + "/image.pcfg --threads 1 --repeat 2");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("outputs identical"), std::string::npos);
  std::regex row(R"(row threads=1 mean_ms=[0-9.]+ min_ms=[0-9.]+ speedup=1\.000)");
  EXPECT_TRUE(std::regex_search(r.out, row)) << r.out;
}

TEST_F(Cli, BenchDetectsDivergence) {
  auto d = gen("shared-code");
  auto r = pcfg_cli("bench " + d + "/image.pcfg --threads 1,2 --repeat 1");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("row threads=2"), std::string::npos);
  r = pcfg_cli("bench " + d + "/image.pcfg --threads 1,2 --repeat 1 --inject-divergence");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("DIVERGENT"), std::string::npos);
  EXPECT_EQ(pcfg_cli("bench " + d + "/image.pcfg --threads 0").code, 2);
}
