#include "diffgp/checks.hpp"
#include "diffgp/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>

using namespace diffgp;
using namespace diffgp::cli;

namespace {

/// Flag values, applied on top of the config file only when given.
struct Flags {
  std::string config;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> setters;

  template <typename T>
  void add(CLI::App* app, const std::string& name, const std::string& help,
           std::function<void(RunConfig&, const T&)> apply) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    setters.emplace_back(opt, [value, apply](RunConfig& c) { apply(c, *value); });
  }

  void add_flag(CLI::App* app, const std::string& name, const std::string& help,
                std::function<void(RunConfig&)> apply) {
    CLI::Option* opt = app->add_flag(name, help);
    setters.emplace_back(opt, std::move(apply));
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw PathError("config file not found", config);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw PathError(std::string("config file is not valid JSON (") + e.what() + ")", config);
      }
      cfg = config_from_json(j, cfg);
    }
    for (const auto& [opt, apply] : setters) {
      if (opt->count() > 0) apply(cfg);
    }
    if (const char* env = std::getenv("DIFFGP_THREADS")) {
      try {
        cfg.threads = std::stoi(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("DIFFGP_THREADS must be an integer, got '") + env + "'");
      }
    }
    return cfg;
  }
};

void add_run_options(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config file (flags take precedence)");
  f.add<std::string>(app, "--data", "CSV data file (default: synthetic data)",
                     [](RunConfig& c, const std::string& v) { c.data = v; });
  f.add<std::string>(app, "--target-col", "target column name or 0-based index (default: last)",
                     [](RunConfig& c, const std::string& v) { c.target_col = v; });
  f.add<std::string>(app, "--task", "regression | binary", [](RunConfig& c, const std::string& v) {
    c = config_from_json({{"task", v}}, c);
  });
  f.add<std::string>(app, "--synthetic", "step | two-moons | concrete-like",
                     [](RunConfig& c, const std::string& v) { c.synthetic = v; });
  f.add<int>(app, "--m", "inducing points for both GPs", [](RunConfig& c, const int& v) { c.m = v; });
  f.add<int>(app, "--mt", "temporal inducing points", [](RunConfig& c, const int& v) { c.mt = v; });
  f.add_flag(app, "--temporal", "use the spatio-temporal field kernel", [](RunConfig& c) { c.temporal = true; });
  f.add<double>(app, "--flow-time", "flow time T", [](RunConfig& c, const double& v) { c.flow_time = v; });
  f.add<int>(app, "--steps", "Euler-Maruyama steps", [](RunConfig& c, const int& v) { c.steps = v; });
  f.add<int>(app, "--samples-eval", "paths per prediction", [](RunConfig& c, const int& v) { c.samples_eval = v; });
  f.add<double>(app, "--lr", "Adam learning rate", [](RunConfig& c, const double& v) { c.lr = v; });
  f.add<int>(app, "--iters", "joint iterations", [](RunConfig& c, const int& v) { c.iters = v; });
  f.add<int>(app, "--warmstart-iters", "predictor-only iterations", [](RunConfig& c, const int& v) {
    c.warmstart_iters = v;
  });
  f.add<int>(app, "--minibatch", "minibatch size (0: automatic)", [](RunConfig& c, const int& v) { c.minibatch = v; });
  f.add<int>(app, "--eval-every", "trace interval", [](RunConfig& c, const int& v) { c.eval_every = v; });
  f.add<int>(app, "--repeats", "number of random splits", [](RunConfig& c, const int& v) { c.repeats = v; });
  f.add<double>(app, "--train-fraction", "training share of each split",
                [](RunConfig& c, const double& v) { c.train_fraction = v; });
  f.add<std::uint64_t>(app, "--seed", "base seed", [](RunConfig& c, const std::uint64_t& v) { c.seed = v; });
  f.add<std::string>(app, "--averaging", "per-sample | mixture", [](RunConfig& c, const std::string& v) {
    c = config_from_json({{"averaging", v}}, c);
  });
  f.add<std::string>(app, "--out", "output directory", [](RunConfig& c, const std::string& v) { c.out = v; });
}

void print_summary(const RunReport& r, const RunConfig& cfg) {
  for (const auto& [k, v] : r.summary) std::cout << k << ' ' << v.formatted << '\n';
  for (const auto& s : r.splits) {
    if (!s.ok) std::cout << "split " << s.split << " (T=" << s.flow_time << ") failed: " << s.message << '\n';
  }
  for (const auto& [k, v] : r.extra.items()) {
    if (k.rfind("spearman", 0) == 0) std::cout << k << ' ' << v << '\n';
  }
  std::cout << "report: " << cfg.out << "/report.json\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differential deep Gaussian process regression and classification"};
  app.require_subcommand(1);
  Flags train_f, bench_f, sweep_f, demo_f;
  CLI::App* train = app.add_subcommand("train", "warm start and joint fit on one split");
  CLI::App* bench = app.add_subcommand("benchmark", "repeated random splits, mean(stderr) metrics");
  CLI::App* sweep = app.add_subcommand("sweep-time", "train and evaluate across flow times");
  CLI::App* demo = app.add_subcommand("step-demo", "step-function demo with warped trajectories");
  CLI::App* check = app.add_subcommand("check", "run the verification suite");
  add_run_options(train, train_f);
  add_run_options(bench, bench_f);
  add_run_options(sweep, sweep_f);
  add_run_options(demo, demo_f);
  std::vector<double> flow_times;
  CLI::Option* times_opt = sweep->add_option("--flow-times", flow_times, "flow times to sweep")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (check->parsed()) {
      bool ok = true;
      for (const auto& r : checks::run_fast_checks()) {
        std::cout << checks::format_line(r) << '\n';
        ok = ok && r.passed;
      }
      return ok ? kExitOk : kExitNumeric;
    }
    RunReport report;
    RunConfig cfg;
    if (train->parsed()) {
      cfg = train_f.resolve();
      report = cmd_train(cfg);
    } else if (bench->parsed()) {
      cfg = bench_f.resolve();
      report = cmd_benchmark(cfg);
    } else if (sweep->parsed()) {
      cfg = sweep_f.resolve();
      if (times_opt->count() > 0) cfg.flow_times = flow_times;
      report = cmd_sweep_time(cfg);
    } else {
      cfg = demo_f.resolve();
      report = cmd_step_demo(cfg);
    }
    print_summary(report, cfg);
    return exit_code(report);
  } catch (const std::exception& e) {
    std::cerr << error_json(e).dump() << '\n';
    return error_exit_code(e);
  }
}
