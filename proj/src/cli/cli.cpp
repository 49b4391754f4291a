#include "diffgp/cli.hpp"

#include "diffgp/random.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#ifndef DIFFGP_VERSION
#define DIFFGP_VERSION "unknown"
#endif

namespace diffgp::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kTrainTag = 0x7a17;
constexpr std::uint64_t kEvalTag = 0xe7a1;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string task_name(Task t) { return t == Task::Binary ? "binary" : "regression"; }

Task parse_task(const std::string& s) {
  if (s == "regression") return Task::Regression;
  if (s == "binary") return Task::Binary;
  throw ConfigError("task must be 'regression' or 'binary', got '" + s + "'");
}

std::string averaging_name(Averaging a) { return a == Averaging::Mixture ? "mixture" : "per-sample"; }

Averaging parse_averaging(const std::string& s) {
  if (s == "per-sample") return Averaging::PerSample;
  if (s == "mixture") return Averaging::Mixture;
  throw ConfigError("averaging must be 'per-sample' or 'mixture', got '" + s + "'");
}

std::string format_time(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

double number_or_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot write output file", path.string());
  return out;
}

}  // namespace

// ---- configuration ----

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(m >= 1, "m must be >= 1");
  require(!temporal || mt >= 1, "mt must be >= 1 when the temporal kernel is enabled");
  require(flow_time >= 0.0 && std::isfinite(flow_time), "flow-time must be finite and >= 0");
  require(steps >= 1, "steps must be >= 1");
  require(train_samples >= 1, "train_samples must be >= 1");
  require(samples_eval >= 1, "samples-eval must be >= 1");
  require(field_variance > 0.0 && noise_variance > 0.0, "variances must be positive");
  require(lr > 0.0, "lr must be positive");
  require(iters >= 0 && warmstart_iters >= 0, "iteration counts must be >= 0");
  require(minibatch >= 0, "minibatch must be >= 0");
  require(eval_every >= 1, "eval_every must be >= 1");
  require(repeats >= 1, "repeats must be >= 1");
  require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
  require(threads >= 1, "threads must be >= 1");
  for (double t : flow_times) require(t >= 0.0 && std::isfinite(t), "flow times must be >= 0");
  if (!data.empty()) {
    if (!fs::is_regular_file(data)) throw PathError("data file not found", data);
  } else {
    require(synthetic == "step" || synthetic == "two-moons" || synthetic == "concrete-like",
            "synthetic must be one of step, two-moons, concrete-like");
    require((synthetic == "two-moons") == (task == Task::Binary),
            "the two-moons data set is the (only) binary synthetic task");
    require(synthetic_levels >= 1, "synthetic_levels must be >= 1");
  }
}

ModelOptions RunConfig::model_options(double t, std::uint64_t model_seed) const {
  ModelOptions mo;
  mo.inducing = m;
  mo.temporal_points = temporal ? mt : 0;
  mo.flow_time = t;
  mo.n_steps = steps;
  mo.train_samples = train_samples;
  mo.likelihood = task == Task::Binary ? LikelihoodKind::Bernoulli : LikelihoodKind::Gaussian;
  mo.noise_variance = noise_variance;
  mo.field_variance = field_variance;
  mo.whiten = whiten;
  mo.seed = model_seed;
  return mo;
}

TrainConfig RunConfig::train_config(std::uint64_t train_seed) const {
  TrainConfig tc;
  tc.learning_rate = lr;
  tc.n_iters = iters;
  tc.minibatch_size = minibatch;
  tc.eval_every = eval_every;
  tc.warmstart_iters = warmstart_iters;
  tc.seed = train_seed;
  return tc;
}

json to_json(const RunConfig& c) {
  return {
      {"task", task_name(c.task)},
      {"data", c.data},
      {"target_col", c.target_col},
      {"synthetic", c.synthetic},
      {"synthetic_n", c.synthetic_n},
      {"synthetic_noise", c.synthetic_noise},
      {"synthetic_levels", c.synthetic_levels},
      {"m", c.m},
      {"temporal", c.temporal},
      {"mt", c.mt},
      {"flow_time", c.flow_time},
      {"steps", c.steps},
      {"train_samples", c.train_samples},
      {"samples_eval", c.samples_eval},
      {"field_variance", c.field_variance},
      {"noise_variance", c.noise_variance},
      {"whiten", c.whiten},
      {"lr", c.lr},
      {"iters", c.iters},
      {"warmstart_iters", c.warmstart_iters},
      {"minibatch", c.minibatch},
      {"eval_every", c.eval_every},
      {"repeats", c.repeats},
      {"train_fraction", c.train_fraction},
      {"seed", c.seed},
      {"flow_times", c.flow_times},
      {"averaging", averaging_name(c.averaging)},
      {"threads", c.threads},
      {"out", c.out},
  };
}

RunConfig config_from_json(const json& j, RunConfig base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  json merged = to_json(base);
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw ConfigError("unknown config key: " + key);
    merged[key] = value;
  }
  try {
    RunConfig c;
    c.task = parse_task(merged.at("task").get<std::string>());
    c.data = merged.at("data").get<std::string>();
    c.target_col = merged.at("target_col").get<std::string>();
    c.synthetic = merged.at("synthetic").get<std::string>();
    c.synthetic_n = merged.at("synthetic_n").get<int>();
    c.synthetic_noise = merged.at("synthetic_noise").get<double>();
    c.synthetic_levels = merged.at("synthetic_levels").get<int>();
    c.m = merged.at("m").get<int>();
    c.temporal = merged.at("temporal").get<bool>();
    c.mt = merged.at("mt").get<int>();
    c.flow_time = merged.at("flow_time").get<double>();
    c.steps = merged.at("steps").get<int>();
    c.train_samples = merged.at("train_samples").get<int>();
    c.samples_eval = merged.at("samples_eval").get<int>();
    c.field_variance = merged.at("field_variance").get<double>();
    c.noise_variance = merged.at("noise_variance").get<double>();
    c.whiten = merged.at("whiten").get<bool>();
    c.lr = merged.at("lr").get<double>();
    c.iters = merged.at("iters").get<int>();
    c.warmstart_iters = merged.at("warmstart_iters").get<int>();
    c.minibatch = merged.at("minibatch").get<int>();
    c.eval_every = merged.at("eval_every").get<int>();
    c.repeats = merged.at("repeats").get<int>();
    c.train_fraction = merged.at("train_fraction").get<double>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.flow_times = merged.at("flow_times").get<std::vector<double>>();
    c.averaging = parse_averaging(merged.at("averaging").get<std::string>());
    c.threads = merged.at("threads").get<int>();
    c.out = merged.at("out").get<std::string>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

Dataset load_dataset(const RunConfig& cfg) {
  if (!cfg.data.empty()) {
    CsvOptions opts;
    opts.target = cfg.target_col;
    opts.task = cfg.task;
    return load_csv(cfg.data, opts);
  }
  if (cfg.synthetic == "step") {
    return make_step_data(cfg.synthetic_n > 0 ? cfg.synthetic_n : 100,
                          cfg.synthetic_noise >= 0 ? cfg.synthetic_noise : 0.05,
                          cfg.synthetic_levels, cfg.seed);
  }
  if (cfg.synthetic == "two-moons") {
    return make_two_moons(cfg.synthetic_n > 0 ? cfg.synthetic_n : 2000,
                          cfg.synthetic_noise >= 0 ? cfg.synthetic_noise : 0.15, cfg.seed);
  }
  if (cfg.synthetic == "concrete-like") {
    return make_concrete_like(cfg.synthetic_n > 0 ? cfg.synthetic_n : 1030, cfg.seed);
  }
  throw ConfigError("unknown synthetic data set: " + cfg.synthetic);
}

// ---- reports ----

bool RunReport::ok() const {
  return std::all_of(splits.begin(), splits.end(), [](const SplitResult& s) { return s.ok; });
}

json to_json(const RunReport& r) {
  json splits = json::array();
  for (const auto& s : r.splits) {
    json trace = json::array();
    for (const auto& p : s.trace) {
      trace.push_back({{"phase", p.phase}, {"iteration", p.iteration}, {"elbo", p.elbo},
                       {"wall_seconds", p.wall_seconds}});
    }
    splits.push_back({{"split", s.split}, {"flow_time", s.flow_time}, {"ok", s.ok},
                      {"message", s.message}, {"metrics", s.metrics}, {"trace", trace},
                      {"wall_seconds", s.wall_seconds}});
  }
  json summary = json::object();
  for (const auto& [k, v] : r.summary) {
    summary[k] = {{"mean", v.mean}, {"std_error", v.std_error}, {"count", v.count},
                  {"formatted", v.formatted}};
  }
  return {{"command", r.command}, {"version", r.version}, {"config", r.config},
          {"splits", splits},     {"summary", summary},   {"extra", r.extra},
          {"wall_seconds", r.wall_seconds}};
}

RunReport report_from_json(const json& j) {
  RunReport r;
  r.command = j.at("command").get<std::string>();
  r.version = j.at("version").get<std::string>();
  r.config = j.at("config");
  r.extra = j.at("extra");
  r.wall_seconds = j.at("wall_seconds").get<double>();
  for (const auto& s : j.at("splits")) {
    SplitResult sr;
    sr.split = s.at("split").get<int>();
    sr.flow_time = s.at("flow_time").get<double>();
    sr.ok = s.at("ok").get<bool>();
    sr.message = s.at("message").get<std::string>();
    for (const auto& [k, v] : s.at("metrics").items()) sr.metrics[k] = number_or_nan(v);
    for (const auto& p : s.at("trace")) {
      sr.trace.push_back({p.at("phase").get<std::string>(), p.at("iteration").get<long>(),
                          number_or_nan(p.at("elbo")), p.at("wall_seconds").get<double>()});
    }
    sr.wall_seconds = s.at("wall_seconds").get<double>();
    r.splits.push_back(std::move(sr));
  }
  for (const auto& [k, v] : j.at("summary").items()) {
    r.summary[k] = {v.at("mean").get<double>(), v.at("std_error").get<double>(),
                    v.at("count").get<int>(), v.at("formatted").get<std::string>()};
  }
  return r;
}

std::string format_mean_stderr(double mean, double std_error, int decimals) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.*f(%.*f)", decimals, mean, decimals, std_error);
  return buf;
}

Summary aggregate(const std::vector<double>& values, int decimals) {
  Summary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) {
    s.mean = std::numeric_limits<double>::quiet_NaN();
    s.std_error = s.mean;
  } else {
    const double n = static_cast<double>(values.size());
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - s.mean) * (v - s.mean);
      s.std_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
  }
  s.formatted = format_mean_stderr(s.mean, s.std_error, decimals);
  return s;
}

int metric_decimals(const std::string& metric) {
  return metric.find("auc") != std::string::npos ? 3 : 2;
}

std::map<std::string, Summary> summarize(const std::vector<SplitResult>& splits) {
  std::set<double> times;
  for (const auto& s : splits) times.insert(s.flow_time);
  std::map<std::string, std::vector<double>> values;
  for (const auto& s : splits) {
    if (!s.ok) continue;
    const std::string prefix = times.size() > 1 ? "T=" + format_time(s.flow_time) + "/" : "";
    for (const auto& [k, v] : s.metrics) values[prefix + k].push_back(v);
  }
  std::map<std::string, Summary> out;
  for (const auto& [k, v] : values) out[k] = aggregate(v, metric_decimals(k));
  return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need >= 2 pairs");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// ---- runs ----

namespace {

void append(std::vector<TracePoint>& to, const std::vector<TracePoint>& from) {
  to.insert(to.end(), from.begin(), from.end());
}

/// Warm start then joint fit; records trace and status into `result`.
void train_model(DiffGPModel& model, TrainState& state, const Matrix& x, const Vector& y,
                 const TrainConfig& tc, SplitResult& result) {
  const FitResult warm = warmstart_sgp(model, x, y, tc);
  append(result.trace, warm.trace);
  if (warm.status != FitStatus::Completed) {
    result.ok = false;
    result.message = warm.message;
    return;
  }
  const FitResult joint = fit(model, x, y, tc, &state);
  append(result.trace, joint.trace);
  if (joint.status != FitStatus::Completed) {
    result.ok = false;
    result.message = joint.message;
  }
  if (!result.trace.empty()) result.metrics["final_elbo"] = result.trace.back().elbo;
}

Vector original_targets(const Dataset& d) {
  return (d.y.array() * d.record.y_std + d.record.y_mean).matrix();
}

}  // namespace

SplitRun run_split(const RunConfig& cfg, const Dataset& raw, int split_index, double flow_time) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto idx = static_cast<std::uint64_t>(split_index);
  SplitRun run;
  run.result.split = split_index;
  run.result.flow_time = flow_time;
  run.data = split(raw, {cfg.train_fraction, cfg.seed, split_index});
  const Dataset& train = run.data.train;
  const Dataset& test = run.data.test;
  run.model = initialize_model(train.x, cfg.model_options(flow_time, derive_seed(cfg.seed, idx, kInitTag)));
  train_model(run.model, run.state, train.x, train.y, cfg.train_config(derive_seed(cfg.seed, idx, kTrainTag)),
              run.result);

  try {
    const std::uint64_t eval_seed = derive_seed(cfg.seed, idx, kEvalTag);
    const Prediction on_train = predict(run.model, train.x, cfg.samples_eval, eval_seed);
    run.test_prediction = predict(run.model, test.x, cfg.samples_eval, eval_seed);
    auto& m = run.result.metrics;
    if (cfg.task == Task::Regression) {
      const double shift = train.record.y_mean, scale = train.record.y_std;
      m["train_rmse_std"] = regression_metrics(on_train, train.y, 0.0, 1.0, cfg.averaging).rmse;
      m["train_rmse"] = regression_metrics(on_train, original_targets(train), shift, scale, cfg.averaging).rmse;
      const RegressionMetrics rm =
          regression_metrics(run.test_prediction, original_targets(test), shift, scale, cfg.averaging);
      m["test_rmse"] = rm.rmse;
      m["test_loglik"] = rm.loglik;
    } else {
      m["train_auc"] = classification_auc(on_train, train.y, cfg.averaging);
      m["test_auc"] = classification_auc(run.test_prediction, test.y, cfg.averaging);
    }
  } catch (const NumericError& e) {
    run.result.ok = false;
    run.result.message = std::string("evaluation: ") + e.what();
  }
  run.result.wall_seconds = seconds_since(t0);
  return run;
}

double gap_statistic(const Vector& input, const std::vector<int>& region, const Matrix& warped) {
  const Eigen::Index n = input.size();
  if (static_cast<Eigen::Index>(region.size()) != n || warped.rows() != n || n < 3) {
    throw std::invalid_argument("gap_statistic: inconsistent inputs");
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return input(a) < input(b); });
  auto log_ratio = [&](auto distance) {
    std::vector<double> boundary, within;
    for (std::size_t k = 0; k + 1 < order.size(); ++k) {
      const Eigen::Index a = order[k], b = order[k + 1];
      (region[static_cast<std::size_t>(a)] != region[static_cast<std::size_t>(b)] ? boundary : within)
          .push_back(distance(a, b));
    }
    if (boundary.empty() || within.empty()) {
      throw std::invalid_argument("gap_statistic: need both boundary and within-region pairs");
    }
    const auto mid = within.begin() + static_cast<std::ptrdiff_t>(within.size() / 2);
    std::nth_element(within.begin(), mid, within.end());
    double median = *mid;
    if (within.size() % 2 == 0) median = 0.5 * (median + *std::max_element(within.begin(), mid));
    const double mean = std::accumulate(boundary.begin(), boundary.end(), 0.0) / boundary.size();
    return std::log(mean / median);
  };
  const double warped_ratio =
      log_ratio([&](Eigen::Index a, Eigen::Index b) { return (warped.row(a) - warped.row(b)).norm(); });
  const double input_ratio = log_ratio([&](Eigen::Index a, Eigen::Index b) { return std::abs(input(a) - input(b)); });
  return warped_ratio - input_ratio;
}

StepDemo run_step_demo(const RunConfig& cfg_in) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = cfg_in;
  cfg.data.clear();
  cfg.synthetic = "step";
  cfg.task = Task::Regression;
  StepDemo demo;
  demo.data = load_dataset(cfg);
  const Dataset data = standardize(demo.data);

  SplitResult result;
  result.flow_time = cfg.flow_time;
  demo.report.command = "step-demo";
  DiffGPModel model = initialize_model(data.x, cfg.model_options(cfg.flow_time, derive_seed(cfg.seed, 0, kInitTag)));
  TrainState state;
  train_model(model, state, data.x, data.y, cfg.train_config(derive_seed(cfg.seed, 0, kTrainTag)), result);

  const std::uint64_t eval_seed = derive_seed(cfg.seed, 0, kEvalTag);
  try {
    const Prediction on_train = predict(model, data.x, cfg.samples_eval, eval_seed);
    result.metrics["train_rmse_std"] = regression_metrics(on_train, data.y, 0.0, 1.0, cfg.averaging).rmse;
    result.metrics["train_rmse"] =
        regression_metrics(on_train, demo.data.y, data.record.y_mean, data.record.y_std, cfg.averaging).rmse;

    const FieldPosterior field(FieldVars::constant(model.field));
    FlowConfig fc = model.flow;
    fc.n_samples = cfg.samples_eval;
    fc.seed = eval_seed;
    demo.trajectories = integrate(data.x, field, fc);

    const int levels = cfg.synthetic_levels;
    std::vector<int> region(static_cast<std::size_t>(data.size()));
    for (Eigen::Index i = 0; i < data.size(); ++i) {
      const int r = static_cast<int>(std::floor((demo.data.x(i, 0) + 1.0) * levels / 2.0));
      region[static_cast<std::size_t>(i)] = std::clamp(r, 0, levels - 1);
    }
    if (levels > 1) {
      double gap = 0.0;
      for (int s = 0; s < fc.n_samples; ++s) {
        gap += gap_statistic(demo.data.x.col(0), region, demo.trajectories.terminal(s));
      }
      result.metrics["gap_statistic"] = gap / fc.n_samples;
    }

    demo.grid.resize(200, 1);
    for (int i = 0; i < 200; ++i) demo.grid(i, 0) = -1.0 + 2.0 * i / 199.0;
    const Matrix grid_std = (demo.grid.array() - data.record.x_mean(0)) / data.record.x_std(0);
    const Prediction curve = predict(model, grid_std, cfg.samples_eval, eval_seed);
    demo.grid_mean = (curve.mean_avg().array() * data.record.y_std + data.record.y_mean).matrix();
    demo.grid_var = curve.y_var_mixture() * (data.record.y_std * data.record.y_std);
  } catch (const NumericError& e) {
    result.ok = false;
    result.message = std::string("evaluation: ") + e.what();
  }
  result.wall_seconds = seconds_since(t0);
  demo.report.splits.push_back(result);
  demo.report.summary = summarize(demo.report.splits);
  demo.report.version = DIFFGP_VERSION;
  demo.report.config = to_json(cfg);
  demo.report.wall_seconds = seconds_since(t0);
  return demo;
}

// ---- commands ----

namespace {

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path out(cfg.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw PathError("cannot create output directory", cfg.out);
  return out;
}

RunReport new_report(const std::string& command, const RunConfig& cfg) {
  RunReport r;
  r.command = command;
  r.version = DIFFGP_VERSION;
  r.config = to_json(cfg);
  return r;
}

void write_common(const fs::path& out, const RunReport& r) {
  open_output(out / "report.json") << to_json(r).dump(2) << '\n';
  std::ofstream metrics = open_output(out / "metrics.csv");
  metrics.precision(17);
  metrics << "split,flow_time,metric,value\n";
  for (const auto& s : r.splits) {
    for (const auto& [k, v] : s.metrics) metrics << s.split << ',' << s.flow_time << ',' << k << ',' << v << '\n';
  }
  std::ofstream trace = open_output(out / "trace.csv");
  trace.precision(17);
  trace << "split,flow_time,phase,iteration,elbo,wall_seconds\n";
  for (const auto& s : r.splits) {
    for (const auto& p : s.trace) {
      trace << s.split << ',' << s.flow_time << ',' << p.phase << ',' << p.iteration << ',' << p.elbo << ','
            << p.wall_seconds << '\n';
    }
  }
}

void write_predictions(const fs::path& path, const SplitRun& run, Task task) {
  std::ofstream out = open_output(path);
  out.precision(17);
  const Dataset& test = run.data.test;
  const Prediction& p = run.test_prediction;
  if (task == Task::Regression) {
    const double shift = test.record.y_mean, scale = test.record.y_std;
    const Vector mean = p.mean_avg();
    const Vector var = p.y_var_mixture();
    out << "index,y_true,pred_mean,pred_var\n";
    for (Eigen::Index i = 0; i < test.size(); ++i) {
      out << run.data.test_index[static_cast<std::size_t>(i)] << ',' << test.y(i) * scale + shift << ','
          << mean(i) * scale + shift << ',' << var(i) * scale * scale << '\n';
    }
  } else {
    const Vector prob = p.prob_avg();
    out << "index,y_true,p_class1\n";
    for (Eigen::Index i = 0; i < test.size(); ++i) {
      out << run.data.test_index[static_cast<std::size_t>(i)] << ',' << (test.y(i) > 0 ? 1 : 0) << ','
          << prob(i) << '\n';
    }
  }
}

/// Runs (split, flow time) jobs on up to cfg.threads workers; results keep job order.
std::vector<SplitResult> run_jobs(const RunConfig& cfg, const Dataset& raw,
                                  const std::vector<std::pair<int, double>>& jobs) {
  std::vector<SplitResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      results[j] = run_split(cfg, raw, jobs[j].first, jobs[j].second).result;
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

}  // namespace

RunReport cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = prepare_out(cfg);
  const Dataset raw = load_dataset(cfg);
  RunReport report = new_report("train", cfg);
  SplitRun run = run_split(cfg, raw, 0, cfg.flow_time);
  report.splits.push_back(run.result);
  report.summary = summarize(report.splits);
  report.extra = {{"n_train", run.data.train.size()}, {"n_test", run.data.test.size()}, {"dims", raw.dims()},
                  {"dropped_rows", raw.dropped_rows}};
  report.wall_seconds = seconds_since(t0);
  write_common(out, report);
  open_output(out / "checkpoint.json") << checkpoint_json(run.model, run.state, to_json(cfg)).dump() << '\n';
  if (run.test_prediction.samples() > 0) write_predictions(out / "predictions.csv", run, cfg.task);
  return report;
}

RunReport cmd_benchmark(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = prepare_out(cfg);
  const Dataset raw = load_dataset(cfg);
  RunReport report = new_report("benchmark", cfg);
  std::vector<std::pair<int, double>> jobs;
  for (int s = 0; s < cfg.repeats; ++s) jobs.emplace_back(s, cfg.flow_time);
  report.splits = run_jobs(cfg, raw, jobs);
  report.summary = summarize(report.splits);
  report.extra = {{"dims", raw.dims()}, {"n", raw.size()}, {"dropped_rows", raw.dropped_rows}};
  report.wall_seconds = seconds_since(t0);
  write_common(out, report);
  return report;
}

RunReport cmd_sweep_time(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = prepare_out(cfg);
  const Dataset raw = load_dataset(cfg);
  const std::vector<double> times = cfg.flow_times.empty() ? std::vector<double>{cfg.flow_time} : cfg.flow_times;
  RunReport report = new_report("sweep-time", cfg);
  std::vector<std::pair<int, double>> jobs;
  for (double t : times) {
    for (int s = 0; s < cfg.repeats; ++s) jobs.emplace_back(s, t);
  }
  report.splits = run_jobs(cfg, raw, jobs);
  report.summary = summarize(report.splits);

  const std::string key = cfg.task == Task::Regression ? "test_rmse" : "test_auc";
  std::vector<double> tx, my;
  for (const auto& s : report.splits) {
    if (s.ok && s.metrics.count(key)) {
      tx.push_back(s.flow_time);
      my.push_back(s.metrics.at(key));
    }
  }
  report.extra = json::object();
  if (std::set<double>(tx.begin(), tx.end()).size() > 1) report.extra["spearman_" + key] = spearman(tx, my);
  report.wall_seconds = seconds_since(t0);
  write_common(out, report);

  std::ofstream sweep = open_output(out / "sweep.csv");
  sweep.precision(17);
  sweep << "flow_time,split,metric,value\n";
  for (const auto& s : report.splits) {
    for (const auto& [k, v] : s.metrics) sweep << s.flow_time << ',' << s.split << ',' << k << ',' << v << '\n';
  }
  return report;
}

RunReport cmd_step_demo(const RunConfig& cfg) {
  cfg.validate();
  const fs::path out = prepare_out(cfg);
  const StepDemo demo = run_step_demo(cfg);
  write_common(out, demo.report);
  if (!demo.trajectories.states.empty()) {
    std::ofstream traj = open_output(out / "trajectories.csv");
    write_trajectory_csv(traj, demo.trajectories);
  }
  if (demo.grid_mean.size() > 0) {
    std::ofstream curve = open_output(out / "curve.csv");
    curve.precision(17);
    curve << "index,x,pred_mean,pred_var\n";
    for (Eigen::Index i = 0; i < demo.grid.rows(); ++i) {
      curve << i << ',' << demo.grid(i, 0) << ',' << demo.grid_mean(i) << ',' << demo.grid_var(i) << '\n';
    }
    std::ofstream data = open_output(out / "data.csv");
    write_csv(data, demo.data);
  }
  return demo.report;
}

int exit_code(const RunReport& r) { return r.ok() ? kExitOk : kExitNumeric; }

json error_json(const std::exception& e) {
  json err = {{"message", e.what()}};
  if (const auto* p = dynamic_cast<const PathError*>(&e)) {
    err["kind"] = "config";
    err["path"] = p->path();
  } else if (const auto* pe = dynamic_cast<const ParseError*>(&e)) {
    err["kind"] = "data";
    err["line"] = pe->line();
  } else if (dynamic_cast<const ConfigError*>(&e)) {
    err["kind"] = "config";
  } else if (dynamic_cast<const DataError*>(&e)) {
    err["kind"] = "data";
  } else if (dynamic_cast<const NumericError*>(&e)) {
    err["kind"] = "numeric";
  } else if (dynamic_cast<const std::invalid_argument*>(&e)) {
    err["kind"] = "config";
  } else {
    err["kind"] = "internal";
  }
  return {{"error", err}};
}

int error_exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DataError*>(&e) ||
      dynamic_cast<const std::invalid_argument*>(&e)) {
    return kExitConfig;
  }
  return kExitNumeric;
}

}  // namespace diffgp::cli
