#include "diffgp/data_io.hpp"

#include "diffgp/errors.hpp"
#include "diffgp/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>

namespace diffgp {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

bool all_numeric(const std::vector<std::string>& fields) {
  return std::all_of(fields.begin(), fields.end(),
                     [](const std::string& f) { return parse_number(f).has_value(); });
}

std::size_t resolve_target(const std::string& target, const std::vector<std::string>& names) {
  if (target.empty()) return names.size() - 1;
  const auto it = std::find(names.begin(), names.end(), target);
  if (it != names.end()) return static_cast<std::size_t>(it - names.begin());
  std::size_t idx = 0;
  const auto [ptr, ec] = std::from_chars(target.data(), target.data() + target.size(), idx);
  if (ec == std::errc() && ptr == target.data() + target.size() && idx < names.size()) return idx;
  throw DataError("target column '" + target + "' not found");
}

}  // namespace

Dataset read_csv(std::istream& in, const CsvOptions& opts) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;
  std::size_t dropped = 0;
  std::size_t width = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    if (first) {
      first = false;
      width = fields.size();
      if (width < 2) throw ParseError("at least two columns required", line_no);
      const bool header = opts.header == Header::Present ||
                          (opts.header == Header::Auto && !all_numeric(fields));
      if (header) {
        names = fields;
        continue;
      }
      for (std::size_t j = 0; j < width; ++j) names.push_back("c" + std::to_string(j));
    }
    if (fields.size() != width) {
      throw ParseError("expected " + std::to_string(width) + " fields, found " +
                           std::to_string(fields.size()),
                       line_no);
    }
    std::vector<double> row;
    row.reserve(width);
    for (const auto& f : fields) {
      const auto v = parse_number(f);
      if (!v) break;
      row.push_back(*v);
    }
    if (row.size() != width) {
      ++dropped;
      continue;
    }
    rows.push_back(std::move(row));
  }
  if (first) throw EmptyDataset("no rows in input");
  if (rows.size() < 2) throw EmptyDataset("fewer than two numeric rows");

  const std::size_t target = resolve_target(opts.target, names);
  Dataset d;
  d.task = opts.task;
  d.dropped_rows = dropped;
  d.target_name = names[target];
  for (std::size_t j = 0; j < width; ++j) {
    if (j != target) d.feature_names.push_back(names[j]);
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  d.x.resize(n, static_cast<Eigen::Index>(width - 1));
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    Eigen::Index c = 0;
    for (std::size_t j = 0; j < width; ++j) {
      if (j == target) {
        d.y(i) = r[j];
      } else {
        d.x(i, c++) = r[j];
      }
    }
  }
  if (d.task == Task::Binary) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = d.y(i);
      if (v == 0.0 || v == -1.0) {
        d.y(i) = -1.0;
      } else if (v == 1.0) {
        d.y(i) = 1.0;
      } else {
        throw DataError("binary target must hold 0/1 or -1/+1 labels, found " + std::to_string(v));
      }
    }
  }
  return d;
}

Dataset load_csv(const std::string& path, const CsvOptions& opts) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file: " + path);
  return read_csv(in, opts);
}

void write_csv(std::ostream& out, const Dataset& data) {
  for (Eigen::Index j = 0; j < data.dims(); ++j) {
    out << (static_cast<std::size_t>(j) < data.feature_names.size() ? data.feature_names[static_cast<std::size_t>(j)]
                                                                      : "x" + std::to_string(j))
        << ',';
  }
  out << data.target_name << '\n';
  const auto old = out.precision(17);
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < data.dims(); ++j) out << data.x(i, j) << ',';
    out << data.y(i) << '\n';
  }
  out.precision(old);
}

void write_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  write_csv(out, data);
}

Dataset apply_standardization(const Dataset& data, const Standardization& record) {
  if (record.x_mean.size() != data.dims()) {
    throw std::invalid_argument("standardization record dimension mismatch");
  }
  Dataset out = data;
  out.x = ((data.x.rowwise() - record.x_mean).array().rowwise() / record.x_std.array()).matrix();
  out.y = ((data.y.array() - record.y_mean) / record.y_std).matrix();
  out.record = record;
  return out;
}

Dataset standardize(const Dataset& data) {
  Standardization r;
  const double n = static_cast<double>(data.size());
  r.x_mean = data.x.colwise().mean();
  r.x_std = ((data.x.rowwise() - r.x_mean).array().square().colwise().sum() / n).sqrt().matrix();
  for (Eigen::Index j = 0; j < r.x_std.size(); ++j) {
    if (!(r.x_std(j) > 0.0)) r.x_std(j) = 1.0;
  }
  if (data.task == Task::Regression) {
    r.y_mean = data.y.mean();
    r.y_std = std::sqrt((data.y.array() - r.y_mean).square().sum() / n);
    if (!(r.y_std > 0.0)) r.y_std = 1.0;
  }
  return apply_standardization(data, r);
}

Dataset unstandardize(const Dataset& data) {
  if (!data.record.fitted()) return data;
  Dataset out = data;
  out.x = (data.x.array().rowwise() * data.record.x_std.array()).matrix().rowwise() + data.record.x_mean;
  out.y = (data.y.array() * data.record.y_std + data.record.y_mean).matrix();
  out.record = {};
  return out;
}

namespace {

Dataset take_rows(const Dataset& d, const std::vector<Eigen::Index>& idx) {
  Dataset out = d;
  out.x.resize(static_cast<Eigen::Index>(idx.size()), d.dims());
  out.y.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = d.x.row(idx[i]);
    out.y(static_cast<Eigen::Index>(i)) = d.y(idx[i]);
  }
  return out;
}

}  // namespace

Split split(const Dataset& raw, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  const Eigen::Index n = raw.size();
  if (n < 2) throw EmptyDataset("cannot split fewer than two rows");
  auto n_train = static_cast<Eigen::Index>(std::llround(spec.train_fraction * static_cast<double>(n)));
  n_train = std::clamp<Eigen::Index>(n_train, 1, n - 1);

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(spec.repetition), 0x5b17));
  for (Eigen::Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Eigen::Index> pick(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  Split s;
  s.train_index.assign(perm.begin(), perm.begin() + n_train);
  s.test_index.assign(perm.begin() + n_train, perm.end());
  s.train = standardize(take_rows(raw, s.train_index));
  s.test = apply_standardization(take_rows(raw, s.test_index), s.train.record);
  return s;
}

Dataset make_step_data(int n, double noise_sd, int levels, std::uint64_t seed) {
  if (n < 10) throw std::invalid_argument("make_step_data: n must be >= 10");
  if (levels < 1 || noise_sd < 0.0) throw std::invalid_argument("make_step_data: invalid arguments");
  Rng rng(derive_seed(seed, 0x57e9));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  Dataset d;
  d.x.resize(n, 1);
  d.y.resize(n);
  d.feature_names = {"x"};
  for (int i = 0; i < n; ++i) {
    const double x = unif(rng);
    const int region = std::min(levels - 1, static_cast<int>((x + 1.0) / 2.0 * levels));
    d.x(i, 0) = x;
    d.y(i) = (region % 2) + (noise_sd > 0.0 ? noise_sd * nd(rng) : 0.0);
  }
  return d;
}

Dataset make_two_moons(int n, double noise_sd, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("make_two_moons: n must be >= 2");
  Rng rng(derive_seed(seed, 0x303e));
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> nd(0.0, noise_sd);
  Dataset d;
  d.task = Task::Binary;
  d.x.resize(n, 2);
  d.y.resize(n);
  d.feature_names = {"x1", "x2"};
  for (int i = 0; i < n; ++i) {
    const double t = angle(rng);
    const bool upper = i % 2 == 0;
    d.x(i, 0) = (upper ? std::cos(t) : 1.0 - std::cos(t)) + nd(rng);
    d.x(i, 1) = (upper ? std::sin(t) : 0.5 - std::sin(t)) + nd(rng);
    d.y(i) = upper ? 1.0 : -1.0;
  }
  return d;
}

Dataset make_concrete_like(int n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("make_concrete_like: n must be >= 2");
  Rng rng(derive_seed(seed, 0xc0c0));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  Dataset d;
  d.x.resize(n, 8);
  d.y.resize(n);
  for (int j = 0; j < 8; ++j) d.feature_names.push_back("x" + std::to_string(j + 1));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 8; ++j) d.x(i, j) = unif(rng);
    const auto r = d.x.row(i);
    d.y(i) = 10.0 * std::sin(std::numbers::pi * r(0) * r(1)) + 20.0 * (r(2) - 0.5) * (r(2) - 0.5) +
             10.0 * r(3) + 5.0 * r(4) + (r(5) > 0.6 ? 8.0 * r(6) : 0.0) + nd(rng);
  }
  return d;
}

}  // namespace diffgp
