#pragma once

#include "diffgp/data_io.hpp"
#include "diffgp/errors.hpp"
#include "diffgp/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace diffgp::cli {

enum ExitCode : int { kExitOk = 0, kExitNumeric = 1, kExitConfig = 2 };

/// A configuration error tied to a file system path.
class PathError : public ConfigError {
 public:
  PathError(const std::string& what, std::string path)
      : ConfigError(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// Everything one run needs. JSON keys are the field names.
struct RunConfig {
  Task task = Task::Regression;
  std::string data;             ///< CSV path; empty selects `synthetic`
  std::string target_col;       ///< name or 0-based index; empty = last column
  std::string synthetic = "step";  ///< step | two-moons | concrete-like
  int synthetic_n = 0;          ///< 0: generator default
  double synthetic_noise = -1;  ///< < 0: generator default
  int synthetic_levels = 4;

  int m = 100;
  bool temporal = false;
  int mt = 3;
  double flow_time = 1.0;
  int steps = 20;
  int train_samples = 1;
  int samples_eval = 25;
  double field_variance = 0.01;
  double noise_variance = 0.1;
  bool whiten = true;

  double lr = 0.01;
  int iters = 10000;
  int warmstart_iters = 5000;
  int minibatch = 0;
  int eval_every = 100;

  int repeats = 1;
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
  std::vector<double> flow_times;  ///< sweep-time grid
  Averaging averaging = Averaging::PerSample;
  int threads = 1;
  std::string out = "diffgp_out";

  /// Throws ConfigError (PathError for unresolvable files).
  void validate() const;
  ModelOptions model_options(double flow_time, std::uint64_t seed) const;
  TrainConfig train_config(std::uint64_t seed) const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Overlays the keys of `j` on `base`; unknown keys are a ConfigError.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});

/// The configured CSV file, or the configured synthetic generator.
Dataset load_dataset(const RunConfig& cfg);

struct SplitResult {
  int split = 0;
  double flow_time = 0.0;
  bool ok = true;
  std::string message;
  std::map<std::string, double> metrics;
  std::vector<TracePoint> trace;
  double wall_seconds = 0.0;

  bool operator==(const SplitResult&) const = default;
};

struct Summary {
  double mean = 0.0;
  double std_error = 0.0;
  int count = 0;
  std::string formatted;  ///< "mean(stderr)"

  bool operator==(const Summary&) const = default;
};

struct RunReport {
  std::string command;
  std::string version;
  nlohmann::json config;
  std::vector<SplitResult> splits;
  std::map<std::string, Summary> summary;
  nlohmann::json extra = nlohmann::json::object();
  double wall_seconds = 0.0;

  bool ok() const;
  bool operator==(const RunReport&) const = default;
};

nlohmann::json to_json(const RunReport& r);
RunReport report_from_json(const nlohmann::json& j);

/// Mean and standard error (sample std / √n; 0 for a single value).
Summary aggregate(const std::vector<double>& values, int decimals);
std::string format_mean_stderr(double mean, double std_error, int decimals);
/// Decimal places used in summaries: 3 for AUC, 2 otherwise.
int metric_decimals(const std::string& metric);
/// Summaries over the successful splits, per metric (and per flow time when
/// the report holds more than one).
std::map<std::string, Summary> summarize(const std::vector<SplitResult>& splits);

/// Spearman rank correlation with tie midranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SplitRun {
  SplitResult result;
  Split data;
  DiffGPModel model;
  TrainState state;
  Prediction test_prediction;
};

/// Warm start then joint fit on one seeded train/test split, with metrics.
SplitRun run_split(const RunConfig& cfg, const Dataset& raw, int split_index, double flow_time);

/// log(mean boundary gap / median within-region gap) of consecutive points
/// (ordered by input) in warped space, minus the same in input space.
/// `region` labels the piece of the signal each point belongs to.
double gap_statistic(const Vector& input, const std::vector<int>& region, const Matrix& warped);

struct StepDemo {
  RunReport report;
  TrajectoryBatch trajectories;
  Matrix grid;           ///< 200 inputs, original units
  Vector grid_mean;      ///< original units
  Vector grid_var;       ///< original units
  Dataset data;          ///< the generated (raw) data
};

/// Trains on the whole step dataset and samples warped trajectories of it.
StepDemo run_step_demo(const RunConfig& cfg);

RunReport cmd_train(const RunConfig& cfg);
RunReport cmd_benchmark(const RunConfig& cfg);
RunReport cmd_sweep_time(const RunConfig& cfg);
RunReport cmd_step_demo(const RunConfig& cfg);

/// Exit code for a finished report: 0, or 1 when any split failed numerically.
int exit_code(const RunReport& r);

/// The structured error document written on failure.
nlohmann::json error_json(const std::exception& e);
int error_exit_code(const std::exception& e);

}  // namespace diffgp::cli
