#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "acrec/cli.hpp"
#include "acrec/error.hpp"
#include "json.hpp"

using namespace acrec;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("acrec_cli_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return cli::run(args, out_, err_);
  }

  std::string read(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
  }

  // Synthetic cycle data preprocessed into root/data.
  void make_dataset() {
    ASSERT_EQ(run({"synth", "--n-items", "6", "--n-users", "40", "--min-length", "5", "--max-length", "8", "--seed", "2",
                   "--output", (root_ / "log.txt").string()}),
              0)
        << err_.str();
    ASSERT_EQ(run({"preprocess", "--input", (root_ / "log.txt").string(), "--output", (root_ / "data").string()}), 0)
        << err_.str();
  }

  std::vector<std::string> model_flags() {
    return {"--data_dir", (root_ / "data").string(), "--checkpoint_dir", (root_ / "ckpt").string(), "--report_dir",
            (root_ / "reports").string(), "--d", "4", "--n", "5", "--heads", "2", "--inner", "4", "--batch_size", "16"};
  }

  // train prints one line per epoch, then the summary
  json last_line() {
    std::string text = out_.str();
    text.pop_back();
    return json::parse(text.substr(text.rfind('\n') + 1));
  }

  std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  }

  fs::path root_;
  std::ostringstream out_, err_;
};

}  // namespace

TEST(CliConfig, LayersFileAndOverrides) {
  const auto path = fs::temp_directory_path() / ("acrec_cfg_" + std::to_string(::getpid()) + ".json");
  std::ofstream(path) << R"({"lr": 0.5, "epochs": 3, "d": 8})";
  RunConfig base;
  base.seed = 99;
  const auto cfg = cli::resolve_config(base, path, {{"epochs", "7"}, {"spatial_enabled", "false"},
                                                    {"fusion_mode", "sum"}, {"data_dir", "x"}});
  EXPECT_DOUBLE_EQ(cfg.lr, 0.5);
  EXPECT_EQ(cfg.epochs, 7u);
  EXPECT_EQ(cfg.model.d, 8u);
  EXPECT_EQ(cfg.seed, 99u);
  EXPECT_FALSE(cfg.model.spatial_enabled);
  EXPECT_EQ(cfg.model.fusion_mode, FusionMode::kSum);
  EXPECT_EQ(cfg.data_dir, "x");
  fs::remove(path);
}

TEST(CliConfig, EveryProblemReportedTogether) {
  try {
    cli::resolve_config({}, std::nullopt, {{"epochs", "many"}, {"lr", "-1"}, {"heads", "3"}, {"position_mode", "x"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    // epochs type, position_mode value, lr range, d not divisible by heads
    EXPECT_EQ(e.problems().size(), 4u) << e.what();
  }
  EXPECT_THROW(cli::resolve_config({}, fs::path("/nonexistent/cfg.json"), {}), ConfigError);
}

TEST(CliConfig, RunIdIsDeterministic) {
  RunConfig a;
  RunConfig b = a;
  EXPECT_EQ(cli::run_id("train", a), cli::run_id("train", b));
  EXPECT_NE(cli::run_id("train", a), cli::run_id("eval", a));
  b.seed = 1;
  EXPECT_NE(cli::run_id("train", a), cli::run_id("train", b));
  const auto id = cli::run_id("train", a);
  EXPECT_EQ(id.size(), std::string("train-").size() + 16);
  EXPECT_EQ(id.rfind("train-", 0), 0u);
}

TEST(CliConfig, ReportRootPrecedence) {
  RunConfig c;
  c.report_dir = "mine";
  EXPECT_EQ(cli::report_root(c), fs::path("mine"));
  c.report_dir.clear();
  ::setenv("ACREC_REPORT_ROOT", "/tmp/env_root", 1);
  EXPECT_EQ(cli::report_root(c), fs::path("/tmp/env_root"));
  ::unsetenv("ACREC_REPORT_ROOT");
  EXPECT_EQ(cli::report_root(c), fs::path("reports"));
}

TEST(CliConfig, ParseLists) {
  EXPECT_EQ(cli::parse_ks("1,5, 20"), (std::vector<std::size_t>{1, 5, 20}));
  EXPECT_THROW(cli::parse_ks("0"), ConfigError);
  EXPECT_THROW(cli::parse_ks("a"), ConfigError);
  const auto e = cli::parse_edges("0,2.5,inf");
  ASSERT_EQ(e.size(), 3u);
  EXPECT_TRUE(std::isinf(e[2]));
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run({}), 1);
  EXPECT_EQ(run({"train", "--no-such-flag", "1"}), 1);
  EXPECT_EQ(run({"bogus"}), 1);
  EXPECT_EQ(run({"train", "--epochs", "many", "--data_dir", "x"}), 1);
  EXPECT_EQ(run({"eval"}), 1);  // no checkpoint_dir
}

TEST_F(CliTest, MissingInputExitsTwo) {
  EXPECT_EQ(run({"preprocess", "--input", (root_ / "missing.txt").string(), "--output", (root_ / "o").string()}), 2);
  EXPECT_EQ(run({"train", "--data_dir", (root_ / "nothing").string(), "--checkpoint_dir", (root_ / "c").string(),
                 "--report_dir", (root_ / "r").string()}),
            2);
}

TEST_F(CliTest, PreprocessIsIdempotent) {
  make_dataset();
  const fs::path first = root_ / "data";
  const fs::path second = root_ / "again";
  ASSERT_EQ(run({"preprocess", "--input", (root_ / "log.txt").string(), "--output", second.string()}), 0);
  for (const char* f : {"train.txt", "valid.txt", "test.txt", "item_vocab.txt", "user_vocab.txt", "summary.json"}) {
    EXPECT_EQ(read(first / f), read(second / f)) << f;
  }
  const auto summary = json::parse(read(first / "summary.json"));
  EXPECT_EQ(summary["users"], 40);
  EXPECT_EQ(summary["items"], 6);
}

TEST_F(CliTest, TrainEvalEndToEnd) {
  make_dataset();
  ASSERT_EQ(run(with({"train", "--epochs", "2"}, model_flags())), 0) << err_.str();
  EXPECT_TRUE(fs::exists(root_ / "ckpt" / "manifest.json"));
  EXPECT_TRUE(fs::exists(root_ / "ckpt" / "config.json"));
  // reports land under report_dir/<run id>
  std::size_t runs = 0;
  for (const auto& entry : fs::directory_iterator(root_ / "reports")) {
    ++runs;
    EXPECT_TRUE(fs::exists(entry.path() / "resolved_config.json"));
    EXPECT_TRUE(fs::exists(entry.path() / "metrics.jsonl"));
    EXPECT_TRUE(fs::exists(entry.path() / "summary.json"));
  }
  EXPECT_EQ(runs, 1u);

  // eval picks the model shape up from the checkpoint
  const std::vector<std::string> eval_flags = {"--data_dir",   (root_ / "data").string(), "--checkpoint_dir",
                                               (root_ / "ckpt").string(), "--report_dir", (root_ / "reports").string()};
  ASSERT_EQ(run(with({"eval", "--ks", "1,3,6"}, eval_flags)), 0) << err_.str();
  const auto report = json::parse(out_.str());
  EXPECT_EQ(report["recall"].size(), 3u);
  for (const char* k : {"1", "3", "6"}) EXPECT_TRUE(report["recall"].contains(k)) << k;
  EXPECT_EQ(report["recall"]["6"], 1.0);  // every item is within the top 6 of a 6-item catalogue
  EXPECT_EQ(report["count"], 40);

  ASSERT_EQ(run(with({"eval", "--lite_inference", "true"}, eval_flags)), 0) << err_.str();
  ASSERT_EQ(run(with({"erase", "--ks", "5"}, eval_flags)), 0) << err_.str();
  EXPECT_TRUE(json::parse(out_.str()).contains("relative_change"));
  ASSERT_EQ(run(with({"kendall"}, eval_flags)), 0) << err_.str();
  EXPECT_EQ(json::parse(out_.str())["mean_tau"].size(), 2u);
  ASSERT_EQ(run(with({"slice", "--mode", "popularity", "--edges", "0,10,inf"}, eval_flags)), 0) << err_.str();
  EXPECT_EQ(json::parse(out_.str())["slices"].size(), 2u);
  EXPECT_EQ(run(with({"slice", "--edges", "5,1"}, eval_flags)), 1);
  EXPECT_EQ(run(with({"erase", "--layer", "7"}, eval_flags)), 1);
}

TEST_F(CliTest, SameConfigGivesSameRunDirectoryAndMetrics) {
  make_dataset();
  ASSERT_EQ(run(with({"train", "--epochs", "2"}, model_flags())), 0) << err_.str();
  const auto first = last_line();
  const auto log = read(fs::path(first["run_dir"].get<std::string>()) / "metrics.jsonl");
  ASSERT_EQ(run(with({"train", "--epochs", "2"}, model_flags())), 0) << err_.str();
  const auto second = last_line();
  EXPECT_EQ(first["run_dir"], second["run_dir"]);
  EXPECT_EQ(log, read(fs::path(second["run_dir"].get<std::string>()) / "metrics.jsonl"));
}

TEST_F(CliTest, GradcheckPasses) {
  ASSERT_EQ(run({"gradcheck", "--report_dir", (root_ / "reports").string()}), 0) << out_.str() << err_.str();
  EXPECT_NE(out_.str().find("gradcheck passed"), std::string::npos);
  EXPECT_NE(out_.str().find("routing leak 0"), std::string::npos);
}
