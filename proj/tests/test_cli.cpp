#include "diffgp/cli.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

using namespace diffgp;
using namespace diffgp::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("diffgp_cli_" + name);
  fs::remove_all(p);
  return p;
}

/// A cheap step-data configuration.
RunConfig tiny(const std::string& out) {
  RunConfig c;
  c.synthetic = "step";
  c.synthetic_n = 40;
  c.m = 8;
  c.flow_time = 1.0;
  c.steps = 4;
  c.samples_eval = 3;
  c.warmstart_iters = 30;
  c.iters = 20;
  c.eval_every = 10;
  c.out = out;
  return c;
}

struct ToolRun {
  int code;
  std::string out;
};

ToolRun run_tool(const std::string& args) {
  const fs::path log = scratch("stdout.txt");
  const std::string cmd = std::string(DIFFGP_TOOL) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::vector<std::vector<std::string>> read_rows(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  RunConfig c = tiny("x");
  c.task = Task::Binary;
  c.synthetic = "two-moons";
  c.flow_times = {0.0, 1.5};
  c.seed = 18446744073709551615ULL;
  c.averaging = Averaging::Mixture;
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, OverlayKeepsUnspecifiedKeys) {
  RunConfig base;
  base.m = 7;
  const RunConfig c = config_from_json({{"iters", 3}}, base);
  EXPECT_EQ(c.iters, 3);
  EXPECT_EQ(c.m, 7);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json({{"mm", 3}}), ConfigError);
  EXPECT_THROW(config_from_json({{"m", "three"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"task", "ranking"}}), ConfigError);
}

TEST(Config, ValidationNamesMissingPath) {
  RunConfig c;
  c.data = "/nonexistent/boston.csv";
  try {
    c.validate();
    FAIL() << "expected PathError";
  } catch (const PathError& e) {
    EXPECT_EQ(e.path(), "/nonexistent/boston.csv");
    EXPECT_EQ(error_exit_code(e), kExitConfig);
    EXPECT_EQ(error_json(e)["error"]["path"], "/nonexistent/boston.csv");
  }
  c.data.clear();
  c.flow_time = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Aggregate, SingleValueHasZeroStderr) {
  const Summary s = aggregate({2.8}, 2);
  EXPECT_EQ(s.std_error, 0.0);
  EXPECT_EQ(s.formatted, "2.80(0.00)");
}

TEST(Aggregate, IdenticalValuesHaveZeroStderr) {
  EXPECT_EQ(aggregate({1.25, 1.25}, 2).std_error, 0.0);
}

TEST(Aggregate, HandMeanAndStandardError) {
  const Summary s = aggregate({1.0, 2.0, 3.0, 4.0}, 3);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  // sample sd = sqrt(5/3), SE = sd / 2
  EXPECT_NEAR(s.std_error, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(s.formatted, "2.500(0.645)");
  EXPECT_EQ(s.count, 4);
}

TEST(Aggregate, SummaryUsesSuccessfulSplitsOnly) {
  std::vector<SplitResult> splits(3);
  splits[0].metrics = {{"test_rmse", 1.0}, {"test_auc", 0.91234}};
  splits[1].metrics = {{"test_rmse", 3.0}, {"test_auc", 0.95}};
  splits[2].ok = false;
  splits[2].metrics = {{"test_rmse", 1e9}};
  const auto s = summarize(splits);
  EXPECT_DOUBLE_EQ(s.at("test_rmse").mean, 2.0);
  EXPECT_EQ(s.at("test_rmse").count, 2);
  EXPECT_EQ(s.at("test_rmse").formatted, "2.00(1.00)");
  EXPECT_EQ(s.at("test_auc").formatted, "0.931(0.019)");
}

TEST(Aggregate, SummaryKeysPerFlowTime) {
  std::vector<SplitResult> splits(2);
  splits[0].flow_time = 0.0;
  splits[1].flow_time = 2.5;
  splits[0].metrics = splits[1].metrics = {{"test_rmse", 1.0}};
  const auto s = summarize(splits);
  EXPECT_TRUE(s.count("T=0/test_rmse"));
  EXPECT_TRUE(s.count("T=2.5/test_rmse"));
}

TEST(Spearman, MonotoneTiesAndHandValue) {
  EXPECT_DOUBLE_EQ(spearman({0, 1, 2, 5}, {9, 8, 7, 1}), -1.0);
  EXPECT_DOUBLE_EQ(spearman({0, 1, 2, 5}, {1, 2, 3, 40}), 1.0);
  // ranks x: 1 2 3 4, y: 2 1 4 3 → 1 − 6·Σd²/(n(n²−1)) = 1 − 6·4/60
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {20, 10, 40, 30}), 0.6, 1e-15);
  // With ties: ranks y = 1.5 1.5 3 4, Pearson of ranks.
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {5, 5, 6, 7}), 0.9486832980505138, 1e-12);
}

TEST(GapStatistic, IdentityIsZeroAndStretchingIsPositive) {
  const int n = 40;
  Vector x(n);
  std::vector<int> region(n);
  for (int i = 0; i < n; ++i) {
    x(i) = -1.0 + 2.0 * (i + 0.5) / n;
    region[i] = i * 4 / n;
  }
  EXPECT_NEAR(gap_statistic(x, region, Matrix(x)), 0.0, 1e-12);
  Matrix stretched = x;
  for (int i = 0; i < n; ++i) stretched(i, 0) += 0.5 * region[i];
  EXPECT_GT(gap_statistic(x, region, stretched), 0.0);
  Matrix squeezed = x;
  for (int i = 0; i < n; ++i) squeezed(i, 0) -= (2.0 / n) * 0.8 * region[i];
  EXPECT_LT(gap_statistic(x, region, squeezed), 0.0);
}

TEST(Commands, TrainWritesReportAndArtifacts) {
  const fs::path out = scratch("train");
  const RunReport r = cmd_train(tiny(out.string()));
  ASSERT_TRUE(r.ok());
  for (const char* key : {"train_rmse", "test_rmse", "test_loglik", "final_elbo"}) {
    EXPECT_TRUE(r.splits[0].metrics.count(key)) << key;
    EXPECT_TRUE(r.summary.count(key)) << key;
  }
  for (const char* f : {"report.json", "metrics.csv", "trace.csv", "checkpoint.json", "predictions.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto preds = read_rows(out / "predictions.csv");
  EXPECT_EQ(preds[0], (std::vector<std::string>{"index", "y_true", "pred_mean", "pred_var"}));
  EXPECT_EQ(preds.size(), 1u + 4u);  // 10% of 40 points
  std::ifstream in(out / "checkpoint.json");
  EXPECT_NO_THROW(model_from_checkpoint(nlohmann::json::parse(in)));
}

TEST(Commands, ReportJsonRoundTrips) {
  const fs::path out = scratch("roundtrip");
  const RunReport r = cmd_train(tiny(out.string()));
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  std::ifstream in(out / "report.json");
  EXPECT_EQ(report_from_json(nlohmann::json::parse(in)), r);
}

TEST(Commands, SeededRerunReproducesMetrics) {
  const RunReport a = cmd_train(tiny(scratch("rerun_a").string()));
  const RunReport b = cmd_train(tiny(scratch("rerun_b").string()));
  EXPECT_EQ(a.splits[0].metrics, b.splits[0].metrics);
}

TEST(Commands, BenchmarkSingleRepeatAndParallelWorkers) {
  RunConfig c = tiny(scratch("bench1").string());
  const RunReport one = cmd_benchmark(c);
  EXPECT_EQ(one.summary.at("test_rmse").std_error, 0.0);

  c.repeats = 3;
  c.out = scratch("bench3").string();
  const RunReport serial = cmd_benchmark(c);
  c.threads = 3;
  c.out = scratch("bench3p").string();
  const RunReport parallel = cmd_benchmark(c);
  ASSERT_EQ(serial.splits.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(serial.splits[i].split, static_cast<int>(i));
    EXPECT_EQ(serial.splits[i].metrics, parallel.splits[i].metrics);
  }
  EXPECT_EQ(serial.summary, parallel.summary);
  EXPECT_GT(serial.summary.at("test_rmse").std_error, 0.0);
}

TEST(Commands, SweepZeroMatchesFlowFreeTrain) {
  RunConfig c = tiny(scratch("sweep0").string());
  c.flow_times = {0.0};
  const RunReport sweep = cmd_sweep_time(c);
  RunConfig t = tiny(scratch("sweep0_train").string());
  t.flow_time = 0.0;
  const RunReport train = cmd_train(t);
  EXPECT_EQ(sweep.splits[0].metrics, train.splits[0].metrics);
}

TEST(Commands, SweepDuplicatedTimesGiveIdenticalRowsAndTrend) {
  RunConfig c = tiny(scratch("sweepdup").string());
  c.flow_times = {1.0, 0.0, 1.0};
  const RunReport r = cmd_sweep_time(c);
  ASSERT_EQ(r.splits.size(), 3u);
  EXPECT_EQ(r.splits[0].metrics, r.splits[2].metrics);
  EXPECT_TRUE(r.extra.contains("spearman_test_rmse"));
  EXPECT_TRUE(fs::exists(fs::path(c.out) / "sweep.csv"));
}

TEST(Commands, StepDemoTrajectoryShape) {
  RunConfig c = tiny(scratch("demo").string());
  c.synthetic_n = 30;
  const RunReport r = cmd_step_demo(c);
  ASSERT_TRUE(r.ok());
  EXPECT_TRUE(r.splits[0].metrics.count("gap_statistic"));
  const auto rows = read_rows(fs::path(c.out) / "trajectories.csv");
  ASSERT_EQ(rows.size(), 1u + static_cast<std::size_t>((c.steps + 1) * 30 * c.samples_eval));
  EXPECT_EQ(rows[0], (std::vector<std::string>{"s", "k", "t", "x1"}));
  // t increases with k inside each (sample, point) group.
  std::map<std::pair<std::string, int>, double> last_t;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const int point = static_cast<int>((i - 1) % 30);
    const auto key = std::make_pair(rows[i][0], point);
    const double t = std::stod(rows[i][2]);
    if (last_t.count(key)) {
      EXPECT_GT(t, last_t[key]);
    }
    last_t[key] = t;
  }
  EXPECT_EQ(read_rows(fs::path(c.out) / "curve.csv").size(), 201u);
}

TEST(Commands, StepDemoWithoutFlowLeavesInputs) {
  RunConfig c = tiny(scratch("demo0").string());
  c.flow_time = 0.0;
  cmd_step_demo(c);
  const auto traj = read_rows(fs::path(c.out) / "trajectories.csv");
  const Dataset data = standardize(load_dataset(c));
  ASSERT_EQ(traj.size(), 1u + 40u * c.samples_eval);
  for (std::size_t i = 1; i < traj.size(); ++i) {
    EXPECT_EQ(std::stod(traj[i][3]), data.x((i - 1) % 40, 0));
  }
}

TEST(Tool, MissingDataFileExitsTwoWithPath) {
  const ToolRun r = run_tool("train --data /nonexistent/file.csv --out " + scratch("bad").string());
  EXPECT_EQ(r.code, 2);
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_EQ(doc["error"]["path"], "/nonexistent/file.csv");
  EXPECT_EQ(doc["error"]["kind"], "config");
}

TEST(Tool, BadFlagValueExitsTwo) {
  EXPECT_EQ(run_tool("train --m notanumber").code, 2);
  EXPECT_EQ(run_tool("train --flow-time -1 --out " + scratch("neg").string()).code, 2);
}

TEST(Tool, FlagsOverrideConfigFile) {
  const fs::path out = scratch("precedence");
  const fs::path cfg = scratch("precedence.json");
  std::ofstream(cfg) << R"({"m": 6, "iters": 50, "warmstart_iters": 5, "steps": 2, "samples_eval": 2,
                           "synthetic_n": 30})";
  const ToolRun r = run_tool("train --config " + cfg.string() + " --iters 3 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream in(out / "report.json");
  const auto report = nlohmann::json::parse(in);
  EXPECT_EQ(report["config"]["iters"], 3);
  EXPECT_EQ(report["config"]["m"], 6);
  EXPECT_EQ(report["config"]["lr"], 0.01);
}

TEST(Tool, CheckSubcommandPasses) {
  const ToolRun r = run_tool("check");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS [5]"), std::string::npos);
}
