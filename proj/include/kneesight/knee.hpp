#pragma once

// Trajectory smoothing, curvature evaluation, and knee-onset detection,
// including a prefix-only early-life estimator that extrapolates a fitted
// capacity INR forward.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kneesight/features.hpp"
#include "kneesight/inr.hpp"

namespace kneesight {

enum class Smoother { moving_average, inr_fit };

std::string to_string(Smoother s);
Smoother smoother_from_string(const std::string& name);

struct KneeConfig {
  Smoother smoother = Smoother::moving_average;
  int window = 5;  // centered moving-average width; odd, >= 3
  // Absolute curvature threshold. When absent, tau resolves to
  // 3x the median |kappa| over the first third of the curvature series
  // (floored at 1e-9 so the resolved threshold stays positive).
  std::optional<double> tau;
  int min_prefix = 3;  // cycles before this value are never flagged
  // Use the raw second derivative Q'' as the detection signal instead of
  // the curvature Q''/(1+Q'^2)^(3/2).
  bool raw_second_derivative = false;
  InrConfig inr;  // model settings for the inr_fit smoother
};

void validate(const KneeConfig& cfg);

struct CurvaturePoint {
  double cycle;
  double kappa;
};

struct KneeReport {
  std::optional<int> knee_cycle;
  std::vector<CurvaturePoint> curvature_series;
  double threshold_used = 0;
  Smoother smoother_used = Smoother::moving_average;
  bool extrapolated = false;  // set when the series extends past the data
};

// Smoothed (cycle, soh) series on the observed cycle grid. The moving
// average keeps windows centered by shrinking them symmetrically at the
// edges; inr_fit fits a capacity INR and resamples it.
std::vector<std::pair<double, double>> smooth_trajectory(const CapacityTrajectory& traj,
                                                         const KneeConfig& cfg);

// Signed curvature Q''/(1+Q'^2)^(3/2) at index k of a (cycle, value) series,
// from central differences on the (possibly non-uniform) cycle grid.
// Throws for boundary indices.
double curvature(std::span<const std::pair<double, double>> series, std::size_t k);

// Smooth, evaluate curvature, and flag the earliest cycle >= min_prefix with
// |kappa| >= tau whose successor sustains at least tau/2 in the same
// direction (isolated one-cycle exceedances are rejected). Absence of a
// knee is a value, not an error.
KneeReport detect_knee(const CapacityTrajectory& traj, const KneeConfig& cfg);

// Fit a capacity INR to a trajectory prefix, extrapolate the curvature
// forward to three prefix lengths, and apply the detection criterion on the
// extrapolated series.
KneeReport early_life_knee(const CapacityTrajectory& prefix, const KneeConfig& cfg,
                           const InrConfig& inr_cfg);

}  // namespace kneesight
