// Runs the installed command-line binary and checks exit codes and outputs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "beatkit/io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "beatkit_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(BEATKIT_CLI_PATH) + " " + args + " >" + (kWork / "stdout.txt").string() +
                          " 2>" + (kWork / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string stdout_text() { return beatkit::read_file((kWork / "stdout.txt").string()); }
std::string stderr_text() { return beatkit::read_file((kWork / "stderr.txt").string()); }
std::string at(const std::string& name) { return (kWork / name).string(); }

const std::string kTinyModel =
    "--set mel_bins=64 --set conv_filters=2 --set d_model=8 --set d_ff=12 --set head_dim=4 --set n_ttl=3 "
    "--set head_windows=1:1,0:2 --set demixed_layers=1";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("gen-data"), 1);  // --out missing
  EXPECT_EQ(run("--profile huge gen-data --out " + at("x")), 1);
  EXPECT_EQ(run("gen-data --out " + at("x") + " --set tempo=3"), 1);
  EXPECT_NE(stderr_text().find("tempo"), std::string::npos);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, PipelineRunsEndToEnd) {
  ASSERT_EQ(run("--seed 4 gen-data --count 3 --out " + at("data") + " --set frames=160 --set mel_bins=64"), 0);
  EXPECT_TRUE(fs::exists(at("data/manifest.sha256")));
  EXPECT_TRUE(fs::exists(at("data/clip_0002.bspc")));

  ASSERT_EQ(run("--seed 1 train-demo --data " + at("data") + " --out " + at("m.btck") + " --epochs 2 " + kTinyModel),
            0);
  EXPECT_EQ(beatkit::read_file(at("m.btck.loss.tsv")).substr(0, 6), "epoch\t");

  ASSERT_EQ(run("decode --checkpoint " + at("m.btck") + " --clip " + at("data/clip_0000.bspc") + " --out " +
                at("est/clip_0000.beats") + " --dbn threshold=0"),
            0);
  EXPECT_TRUE(fs::exists(at("est/clip_0000.bact")));
  EXPECT_TRUE(fs::exists(at("est/clip_0000.beats.run.json")));

  ASSERT_EQ(run("evaluate --est " + at("data") + " --ref " + at("data")), 0);
  EXPECT_NE(stdout_text().find("mean\t1.000000\t1.000000\t1.000000"), std::string::npos);

  ASSERT_EQ(run("export-attention --checkpoint " + at("m.btck") + " --clip " + at("data/clip_0001.bspc") +
                " --out " + at("att") + " --steps 1,3 --head 0"),
            0);
  EXPECT_TRUE(fs::exists(at("att/P_L3_head0.pgm")));
  EXPECT_EQ(run("export-attention --checkpoint " + at("m.btck") + " --clip " + at("data/clip_0001.bspc") +
                " --out " + at("att") + " --steps 4"),
            1);

  ASSERT_EQ(run("bench-dsa --lengths 64,128 --trials 1 --head-dim 4"), 0);
  EXPECT_EQ(stdout_text().substr(0, 2), "T,");
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run("evaluate --est " + at("missing") + " --ref " + at("missing")), 2);
  EXPECT_EQ(run("train-demo --data " + at("missing") + " --out " + at("m2.btck")), 2);
  beatkit::write_file(at("junk.bspc"), "not a clip");
  EXPECT_EQ(run("decode --checkpoint " + at("m.btck") + " --clip " + at("junk.bspc") + " --out " + at("j.beats")), 2);
}

TEST_F(Cli, DivergenceExitsThree) {
  ASSERT_EQ(run("gen-data --count 2 --out " + at("div") + " --set frames=64 --set mel_bins=64"), 0);
  EXPECT_EQ(run("train-demo --data " + at("div") + " --out " + at("d.btck") + " --epochs 30 --lr 1e200 " + kTinyModel),
            3);
  EXPECT_NE(stderr_text().find("diverged"), std::string::npos);
}
