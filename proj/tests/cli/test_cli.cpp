#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

#include "json.hpp"
#include "midinf/midi_io.hpp"
#include "support/fixtures.hpp"

using namespace midinf;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(MIDINF_CLI_PATH) + " " + args + " 2>/dev/null";
  RunResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("midinf_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenerateWritesRequestedNotes) {
  ASSERT_EQ(run("generate --notes 170 --seed 1 --ensemble 0,24,32,128 --out " + path("a.mid")).exit_code, 0);
  const auto notes = read_midi(read_file_bytes(path("a.mid"))).notes;
  EXPECT_EQ(notes.size(), 170u);
}

TEST_F(Cli, GenerateIsDeterministic) {
  const std::string flags = "generate --notes 400 --seed 5 --ensemble 0,1,2 --alpha 2 --temperature 0.9 --top-p 0.95 ";
  ASSERT_EQ(run(flags + "--out " + path("a.mid")).exit_code, 0);
  ASSERT_EQ(run(flags + "--out " + path("b.mid")).exit_code, 0);
  ASSERT_EQ(run("generate --notes 400 --seed 6 --ensemble 0,1,2 --out " + path("c.mid")).exit_code, 0);
  EXPECT_EQ(read_file_bytes(path("a.mid")), read_file_bytes(path("b.mid")));
  EXPECT_NE(read_file_bytes(path("a.mid")), read_file_bytes(path("c.mid")));
}

TEST_F(Cli, EnsembleZeroGivesOnlyPiano) {
  ASSERT_EQ(run("generate --notes 300 --seed 2 --ensemble 0 --out " + path("p.mid")).exit_code, 0);
  for (const auto& n : read_midi(read_file_bytes(path("p.mid"))).notes) ASSERT_EQ(n.instrument, 0);
}

TEST_F(Cli, GenerateContinuesPrompt) {
  std::vector<NoteEvent> prompt;
  for (int i = 0; i < 10; ++i) prompt.push_back(NoteEvent{0.8 * (i + 1), 0.3, 0, 60 + i, 90});
  write_file_bytes(path("prompt.mid"), write_midi(prompt));
  ASSERT_EQ(run("generate --notes 50 --prompt " + path("prompt.mid") + " --ensemble 0 --out " + path("c.jsonl")).exit_code, 0);
  std::ifstream in(path("c.jsonl"));
  std::string line;
  int count = 0;
  while (std::getline(in, line)) {
    EXPECT_GE(nlohmann::json::parse(line).at("onset_s").get<double>(), 8.0);
    ++count;
  }
  EXPECT_EQ(count, 50);
}

TEST_F(Cli, ConfigFileMirrorsFlagsAndFlagsWin) {
  std::ofstream(path("cfg.json")) << R"({"notes": 30, "seed": 9, "ensemble": [5], "alpha": 1.5})";
  ASSERT_EQ(run("--config " + path("cfg.json") + " generate --out " + path("x.mid")).exit_code, 0);
  auto notes = read_midi(read_file_bytes(path("x.mid"))).notes;
  EXPECT_EQ(notes.size(), 30u);
  for (const auto& n : notes) EXPECT_EQ(n.instrument, 5);
  ASSERT_EQ(run("--config " + path("cfg.json") + " generate --ensemble 7 --out " + path("y.mid")).exit_code, 0);
  for (const auto& n : read_midi(read_file_bytes(path("y.mid"))).notes) EXPECT_EQ(n.instrument, 7);
}

TEST_F(Cli, StreamEmitsExactlyTheLimit) {
  const RunResult r = run("stream --notes-limit 1000 --seed 3");
  ASSERT_EQ(r.exit_code, 0);
  std::istringstream lines(r.out);
  std::string line;
  int count = 0;
  double last = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    ASSERT_EQ(j.size(), 5u);
    const NoteEvent n = j.get<NoteEvent>();
    EXPECT_GE(n.onset_s, last);
    last = n.onset_s;
    ++count;
  }
  EXPECT_EQ(count, 1000);
}

TEST_F(Cli, StreamSlowReaderLosesNothing) {
  // A reader that pauses mid-stream; the generator must wait rather than drop.
  const std::string cmd = std::string(MIDINF_CLI_PATH) +
                          " stream --notes-limit 600 --queue 8 --seed 4 2>/dev/null | (head -c 2000; sleep 1; cat) | wc -l";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  ASSERT_TRUE(pipe);
  char buf[64] = {};
  std::fgets(buf, sizeof buf, pipe);
  ::pclose(pipe);
  EXPECT_EQ(std::stoi(buf), 600);
}

TEST_F(Cli, ProfileSyntheticFixtureMatchesClosedForm) {
  nlohmann::json gens = nlohmann::json::array();
  gens.push_back(midinf::testing::constant_density(40, 30));
  std::ofstream(path("gens.json")) << gens.dump();
  const RunResult r = run("profile --generations-file " + path("gens.json") + " --rate-override 90 --out " +
                          path("report.json") + " --csv " + path("d.csv"));
  ASSERT_EQ(r.exit_code, 0);
  const auto report = nlohmann::json::parse(std::ifstream(path("report.json")));
  const double horizon = report.at("density").at("horizon_s");
  const double expected = 90.0 * 2 / (30.0 * horizon);
  EXPECT_NEAR(report.at("streamable")[0].at("fraction").get<double>(), 0.0, 0.005);
  EXPECT_NEAR(report.at("streamable")[1].at("fraction").get<double>(), expected, 0.005);
  EXPECT_DOUBLE_EQ(report.at("rate").at("notes_s").get<double>() * 3, 90.0);
  EXPECT_TRUE(fs::exists(path("d.csv")));
}

TEST_F(Cli, ProfileSingleGenerationHasZeroStdev) {
  ASSERT_EQ(run("profile --generations 1 --out " + path("r.json") + " --csv " + path("d.csv") + " --svg " +
                path("d.svg"))
                .exit_code,
            0);
  const auto report = nlohmann::json::parse(std::ifstream(path("r.json")));
  for (const auto& b : report.at("density").at("bins")) EXPECT_EQ(b.at("stdev_tok_s"), 0.0);
  EXPECT_TRUE(fs::exists(path("d.svg")));
}

TEST_F(Cli, ProfileRateOverrideOrdering) {
  const RunResult r = run("profile --generations 3 --rate-override 155 --out " + path("r.json"));
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("155.0 tok/s (51.7 notes/s)"), std::string::npos) << r.out;
  const auto report = nlohmann::json::parse(std::ifstream(path("r.json")));
  EXPECT_GE(report.at("streamable")[1].at("fraction").get<double>(),
            report.at("streamable")[0].at("fraction").get<double>());
}

TEST_F(Cli, PlotRendersCsv) {
  std::ofstream(path("d.csv")) << "bin_start_s,mean_tok_s,stdev_tok_s,n\n0,100,10,5\n1,120,20,5\n";
  ASSERT_EQ(run("plot --csv " + path("d.csv") + " --rate 155 --out " + path("p.svg")).exit_code, 0);
  std::stringstream svg;
  svg << std::ifstream(path("p.svg")).rdbuf();
  EXPECT_NE(svg.str().find("stdev-band"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("generate --temperature -1").exit_code, 2);
  EXPECT_EQ(run("generate --ensemble 400 --out " + path("z.mid")).exit_code, 2);
  EXPECT_EQ(run("frobnicate").exit_code, 2);
  EXPECT_EQ(run("generate --prompt /nonexistent.mid").exit_code, 2);
  std::ofstream(path("bad.mid")) << "garbage";
  EXPECT_EQ(run("generate --prompt " + path("bad.mid") + " --out " + path("z.mid")).exit_code, 3);
  EXPECT_EQ(run("generate --notes 5 --out /nonexistent_dir/z.mid --ensemble 0").exit_code, 3);
  std::ofstream(path("w.wtm")) << "xx";
  std::ofstream(path("w.wtm.json")) << "{}";
  EXPECT_EQ(run("generate --weights " + path("w.wtm") + " --out " + path("z.mid")).exit_code, 4);
  EXPECT_EQ(run("generate --notes 340 --out " + path("z.mid")).exit_code, 3);  // more than 15 melodic instruments
}

TEST_F(Cli, InitWeightsThenGenerateFromFile) {
  ASSERT_EQ(run("init-weights --weight-seed 3 --out " + path("m.wtm")).exit_code, 0);
  ASSERT_EQ(run("generate --weights " + path("m.wtm") + " --notes 20 --ensemble 0 --out " + path("a.mid")).exit_code, 0);
  ASSERT_EQ(run("generate --weight-seed 3 --notes 20 --ensemble 0 --out " + path("b.mid")).exit_code, 0);
  EXPECT_EQ(read_file_bytes(path("a.mid")), read_file_bytes(path("b.mid")));
}

TEST_F(Cli, VocabAndTokenize) {
  const auto v = nlohmann::json::parse(run("vocab").out);
  EXPECT_EQ(v.get<VocabSpec>(), VocabSpec{});
  write_file_bytes(path("t.mid"), write_midi(std::vector<NoteEvent>{{0.0, 0.5, 0, 60, 80}}));
  const auto t = nlohmann::json::parse(run("tokenize --in " + path("t.mid")).out);
  EXPECT_EQ(t.at("tokens"), (std::vector<int>{27512, 0, 10049, 11060}));
}

TEST_F(Cli, ListenPortInUseExitsFive) {
  // Occupy a port with a first listener, then try to bind it again.
  const std::string first = std::string(MIDINF_CLI_PATH) + " stream --listen 127.0.0.1:47311 --wait-for-start >/dev/null 2>&1 & echo $!";
  FILE* pipe = ::popen(first.c_str(), "r");
  char pid[32] = {};
  std::fgets(pid, sizeof pid, pipe);
  ::pclose(pipe);
  std::this_thread::sleep_for(std::chrono::milliseconds(500));
  EXPECT_EQ(run("stream --listen 127.0.0.1:47311").exit_code, 5);
  std::system(("kill -INT " + std::string(pid)).c_str());
}
