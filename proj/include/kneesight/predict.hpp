#pragma once

// Early-life SOH/RUL regression: supervised dataset assembly with leakage
// guards, linear/polynomial baselines, a variance-reduction random forest
// with ensemble uncertainty, an INR-backed regressor, cell-level
// cross-validation, cross-dataset RMSE matrices, calibration diagnostics,
// and permutation importance.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kneesight/features.hpp"
#include "kneesight/ingest.hpp"
#include "kneesight/inr.hpp"
#include "kneesight/knee.hpp"

namespace kneesight {

enum class TargetKind { soh, rul };
enum class LeakageClass { early_life, full_trajectory };

std::string to_string(TargetKind t);
TargetKind target_kind_from_string(const std::string& name);
std::string to_string(LeakageClass c);

// One cell's inputs to dataset assembly: the capacity trajectory plus the
// per-cycle descriptor rows when available (rows may be empty; stressor
// features are then omitted for the whole dataset).
struct CellRecord {
  CapacityTrajectory trajectory;
  std::vector<CycleRow> rows;
};

struct DatasetRow {
  std::string cell_id;
  std::vector<double> features;
  double target = 0;
};

struct SupervisedDataset {
  std::vector<DatasetRow> rows;  // grouped by cell, cycles ascending
  std::vector<std::string> feature_names;
  TargetKind target_kind = TargetKind::rul;
  int early_window = 0;  // prefix width N used for the per-cell feature block
  LeakageClass leakage_class = LeakageClass::early_life;
  std::string tag;  // dataset label ("mixed" when cells disagree)
};

struct DatasetConfig {
  TargetKind target = TargetKind::rul;
  int early_window = 10;  // N >= 4 observed points per cell
  LeakageClass mode = LeakageClass::early_life;
  KneeConfig knee;          // full-trajectory detection settings
  InrConfig early_knee_inr; // extrapolation model behind the early knee feature
};

void validate(const DatasetConfig& cfg);

// Builds one row per eligible cycle. The per-cell feature block comes from
// the first N observed points only: the row's cycle index, Q0, the N SOH
// values, least-squares SOH slopes over the whole prefix and its second
// half, and (early_life mode) the extrapolated early knee estimate, capped
// at first_cycle + 3N when no knee is flagged. full_trajectory mode swaps
// the early estimate for the detected knee cycle (the trajectory annotation
// when present, right-censored at the last cycle when absent) and the
// maximum |curvature| of the smoothed full curve. Mean prefix stressors
// (current, temperature) are appended when every cell has finite values.
//
// early_life rows stop at the prefix; full_trajectory rows span the whole
// curve. rul targets are EOL - k (rows past EOL are dropped); soh targets
// are the observed SOH at the row's cycle. Cells shorter than N points are
// skipped; requesting rul for a cell without an EOL annotation throws.
SupervisedDataset make_dataset(std::span<const CellRecord> cells, const DatasetConfig& cfg);

// Rebuilds every feature vector of an early-life dataset from cells
// truncated to their first N points (and matching descriptor rows) and
// counts rows whose stored features are not reproduced bit-exactly.
// 0 means no feature leaked information from beyond the prefix.
int leakage_audit(const SupervisedDataset& dataset, std::span<const CellRecord> cells,
                  const DatasetConfig& cfg);

// Per-row fold labels in [0, n_folds): distinct cells are shuffled
// deterministically by seed and dealt round-robin, so every cell's rows land
// in exactly one fold and within-cell row order is untouched.
std::vector<int> cell_level_split(const SupervisedDataset& dataset, int n_folds,
                                  std::uint64_t seed);

enum class BaselineKind { linear, polynomial };

// Ordinary least squares on the (polynomially expanded) features via normal
// equations; a 1e-10 diagonal jitter retries singular systems once.
struct BaselineModel {
  BaselineKind kind = BaselineKind::linear;
  int degree = 1;
  std::size_t n_features = 0;
  std::vector<std::vector<int>> terms;  // per-term feature exponents
  std::vector<double> coefficients;     // intercept first, then the terms
};

BaselineModel fit_baseline(const SupervisedDataset& dataset, BaselineKind kind,
                           int degree = 2);
double predict(const BaselineModel& model, std::span<const double> x);

struct ForestConfig {
  int n_trees = 300;
  int max_depth = 0;           // 0 = unlimited
  int min_samples_split = 2;
  int features_per_split = 0;  // 0 = ceil(d / 3)
  bool bootstrap = true;
  std::uint64_t seed = 0;
};

void validate(const ForestConfig& cfg);

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0;
  int left = -1;
  int right = -1;
  double value = 0;  // leaf mean
};

struct ForestModel {
  ForestConfig config;
  std::size_t n_features = 0;
  std::vector<std::vector<TreeNode>> trees;
};

enum class UncertaintySource { forest_ensemble, mc_dropout };

struct UncertainPrediction {
  double mean = 0;
  double sigma = 0;  // standard deviation, >= 0
  UncertaintySource source = UncertaintySource::forest_ensemble;
};

// CART regression trees: exhaustive variance-reduction splits over midpoints
// of sorted unique candidate-feature values, ceil(d/3) random candidate
// features per node, bootstrap rows per tree. Each tree's RNG is derived
// from (seed, tree index), so results do not depend on scheduling order.
ForestModel fit_forest(const SupervisedDataset& dataset, const ForestConfig& cfg,
                       int jobs = 1);
double predict(const ForestModel& model, std::span<const double> x);
// Mean over trees and the population standard deviation across tree outputs.
UncertainPrediction predict_with_variance(const ForestModel& model,
                                          std::span<const double> x);

struct InrRegressor {
  InrModel model;
  TrainingReport report;
};

// Trains an INR on (feature vector -> target) with a deterministic
// validation split and early stopping (patience 10). Every feature column
// must have nonzero spread. MC dropout on the wrapped model provides
// uncertainty.
InrRegressor fit_inr_regressor(const SupervisedDataset& dataset, InrConfig cfg,
                               double val_fraction = 0.2);
double predict(const InrRegressor& reg, std::span<const double> x);

struct EvalReport {
  double rmse = 0;
  double mae = 0;
  double mape = 0;  // percent, zero-target rows excluded
  double r2 = 0;
  int n = 0;
  int mape_excluded = 0;  // zero-target rows left out of mape
  int n_folds = 1;
  // Mean and population std of each metric across folds; for a single
  // evaluation the means repeat the pooled values and the stds are zero.
  double rmse_mean = 0, rmse_std = 0;
  double mae_mean = 0, mae_std = 0;
  double mape_mean = 0, mape_std = 0;
  double r2_mean = 0, r2_std = 0;
};

// rmse = sqrt(mean e^2), mae = mean |e|, mape = 100 mean |e/y| over y != 0,
// r2 = 1 - SS_res/SS_tot. Constant targets make r2 undefined (error), as
// does an all-zero target for mape.
EvalReport evaluate(std::span<const double> predictions, std::span<const double> targets);

struct ModelSpec {
  enum class Kind { baseline_linear, baseline_polynomial, forest, inr };
  Kind kind = Kind::forest;
  int poly_degree = 2;
  ForestConfig forest;
  InrConfig inr;
  double inr_val_fraction = 0.2;
  int jobs = 1;
};

// Fits the spec'd model on the whole dataset and returns a predictor bound
// to it (the closure owns the model).
std::function<double(std::span<const double>)> fit_model(const SupervisedDataset& dataset,
                                                         const ModelSpec& spec);

// K-fold cross-validation with cell-level folds: per-fold metrics aggregated
// into mean/std, pooled metrics over the concatenated held-out predictions.
EvalReport cross_validate(const SupervisedDataset& dataset, const ModelSpec& spec,
                          int n_folds, std::uint64_t seed);

struct CrossDatasetMatrix {
  std::vector<std::string> tags;
  std::vector<std::vector<double>> rmse;  // [train_tag][test_tag]
};

// Trains the spec'd model on each tagged population in turn and reports
// RMSE on every population, including the in-sample diagonal.
CrossDatasetMatrix cross_dataset_matrix(std::span<const SupervisedDataset> populations,
                                        const ModelSpec& spec);

struct CalibrationBin {
  double mean_sigma = 0;
  double rmse = 0;
  int count = 0;
};

struct CalibrationReport {
  std::optional<double> pearson;   // absent when either input is constant
  std::optional<double> spearman;
  std::vector<CalibrationBin> bins;       // 10 equal-mass bins by sigma
  std::vector<double> retained_fraction;  // confidence-error curve, sigma asc
  std::vector<double> cumulative_rmse;
};

// Correlates predicted sigma with |error|, bins the pairs into 10
// equal-mass sigma bins (mean sigma vs RMSE), and traces the
// confidence-error curve: cumulative RMSE of the lowest-sigma fraction.
CalibrationReport calibration_report(std::span<const double> sigmas,
                                     std::span<const double> abs_errors);

struct FeatureImportance {
  std::string feature;
  double rmse_increase = 0;
};

// Mean held-out RMSE increase when one feature column is shuffled (10
// seeded shuffles per feature), sorted descending.
std::vector<FeatureImportance> permutation_importance(
    const std::function<double(std::span<const double>)>& predictor,
    const SupervisedDataset& held_out, std::uint64_t seed);

}  // namespace kneesight
