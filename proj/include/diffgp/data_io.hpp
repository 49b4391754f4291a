#pragma once

#include "diffgp/linalg.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace diffgp {

enum class Task { Regression, Binary };

/// Per-column affine map z = (v − mean)/std. Identity when never fitted.
struct Standardization {
  RowVector x_mean;
  RowVector x_std;
  double y_mean = 0.0;
  double y_std = 1.0;

  bool fitted() const { return x_mean.size() > 0; }
};

struct Dataset {
  Matrix x;  ///< N×D
  Vector y;  ///< continuous, or ±1 for Task::Binary
  Task task = Task::Regression;
  std::vector<std::string> feature_names;
  std::string target_name = "y";
  Standardization record;
  std::size_t dropped_rows = 0;

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dims() const { return x.cols(); }
};

enum class Header { Auto, Present, Absent };

struct CsvOptions {
  std::string target;  ///< column name or 0-based index; empty selects the last column
  Header header = Header::Auto;
  Task task = Task::Regression;
};

/// Rows with non-numeric or non-finite fields are dropped and counted; a row
/// with the wrong field count raises ParseError with its line number.
Dataset load_csv(const std::string& path, const CsvOptions& opts = {});
Dataset read_csv(std::istream& in, const CsvOptions& opts = {});

/// Header row of feature names then target; values printed round-trip exact.
void write_csv(std::ostream& out, const Dataset& data);
void write_csv(const std::string& path, const Dataset& data);

/// Fits the record on `data` itself (population std; y only for regression).
Dataset standardize(const Dataset& data);
/// Applies an existing record (e.g. one fitted on a training split).
Dataset apply_standardization(const Dataset& data, const Standardization& record);
/// Inverts the stored record.
Dataset unstandardize(const Dataset& data);

struct SplitSpec {
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
  int repetition = 0;
};

struct Split {
  Dataset train;  ///< standardized on its own statistics
  Dataset test;   ///< standardized with the training record
  std::vector<Eigen::Index> train_index;
  std::vector<Eigen::Index> test_index;
};

/// Seeded random partition of the raw data, standardized on train only.
Split split(const Dataset& raw, const SplitSpec& spec);

/// x ~ U[−1,1]; y alternates 0,1 over `levels` equal-width regions plus N(0, noise_sd²).
Dataset make_step_data(int n, double noise_sd, int levels, std::uint64_t seed);

/// Two interleaved half circles with isotropic Gaussian noise; labels ±1.
Dataset make_two_moons(int n, double noise_sd, std::uint64_t seed);

/// Smooth eight-feature regression surface with one sharp threshold effect.
Dataset make_concrete_like(int n, std::uint64_t seed);

}  // namespace diffgp
