#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "orthokd/checkpoint.hpp"

using namespace orthokd;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("orthokd_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.cfg") << "model.width = 4\n"
                                        "data.classes = 4\n"
                                        "data.synthetic.train = 96\n"
                                        "data.synthetic.test = 32\n"
                                        "data.synthetic.size = 8\n"
                                        "train.epochs = 1\n"
                                        "train.batch_size = 32\n"
                                        "finetune.epochs = 1\n"
                                        "finetune.batch_size = 32\n"
                                        "distill.mode = none\n"
                                        "landscape.grid = 3\n"
                                        "landscape.samples = 16\n"
                                        "score.batch = 8\n";
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) {
    const std::string cmd = std::string(ORTHOKD_CLI) + " " + args + " > " + (dir_ / "stdout").string() +
                            " 2> " + (dir_ / "stderr").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string stdout_text() const {
    std::ifstream in(dir_ / "stdout");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  std::string common() const {
    return "--config " + (dir_ / "tiny.cfg").string() + " --out-dir " + dir_.string();
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, TrainPruneFinetuneEvaluate) {
  ASSERT_EQ(run("train " + common()), 0);
  EXPECT_NE(stdout_text().find("accuracy "), std::string::npos);
  ASSERT_TRUE(fs::exists(path("model.ckpt")));
  ASSERT_EQ(run("prune --checkpoint " + path("model.ckpt") + " " + common()), 0);
  ASSERT_EQ(run("finetune --checkpoint " + path("pruned.ckpt") + " " + common()), 0);
  ASSERT_EQ(run("evaluate --checkpoint " + path("finetuned.ckpt") + " " + common()), 0);
  EXPECT_NE(stdout_text().find("digest "), std::string::npos);
}

TEST_F(Cli, LandscapeAndScores) {
  ASSERT_EQ(run("train --seed 1 " + common()), 0);
  fs::rename(path("model.ckpt"), path("a.ckpt"));
  ASSERT_EQ(run("train --seed 2 " + common()), 0);
  ASSERT_EQ(run("landscape --checkpoint " + path("a.ckpt") + " " + common()), 0);
  EXPECT_TRUE(fs::exists(path("landscape.csv")));
  EXPECT_TRUE(fs::exists(path("landscape.vtk")));
  ASSERT_EQ(run("score-diversity --group s=" + path("a.ckpt") + "," + path("model.ckpt") + " " +
                common()),
            0);
  EXPECT_EQ(stdout_text().substr(0, 38), "name,n,avg,stddev,errmargin,interval99");
}

TEST_F(Cli, ReportFromResults) {
  std::ofstream(dir_ / "results.csv")
      << "tag,train_type,seed,accuracy,model,config_digest,model_digest,teacher_digest\n"
         "Unpruned,scratch,1,71.23,m,c,d,\nScratch,scratch,1,70.06,m,c,d,\n"
         "Unpruned,label,1,73.76,m,c,d,t\nSelf-Distill,label,1,73.30,m,c,d,t\n";
  ASSERT_EQ(run("report --results " + path("results.csv") + " --out-dir " + dir_.string()), 0);
  EXPECT_NE(stdout_text().find("| 0.71 |"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("report.md")));
}

TEST_F(Cli, ConfigErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("bogus-subcommand"), 1);
  EXPECT_EQ(run("train --config " + path("missing.cfg")), 1);
  std::ofstream(dir_ / "bad.cfg") << "train.lrate = 0.1\n";
  EXPECT_EQ(run("train --config " + path("bad.cfg")), 1);
  EXPECT_EQ(run("train " + common() + " --set distill.alpha=2"), 1);
  EXPECT_EQ(run("evaluate --checkpoint " + path("missing.ckpt") + " " + common()), 1);
  EXPECT_EQ(run("train " + common() + " --jobs 0"), 1);
}

TEST_F(Cli, NumericFailureExitsTwo) {
  ModelGraph m = build_micro_resnet(1, 4, 4, 1, 3, 8);
  m.param("fc.bias").mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  write_checkpoint(path("nan.ckpt"), make_checkpoint(m));
  EXPECT_EQ(run("finetune --checkpoint " + path("nan.ckpt") + " " + common()), 2);
}
