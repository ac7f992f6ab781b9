#pragma once

// Per-cycle capacity/energy/shape descriptors and per-cell capacity
// trajectories with EOL annotation.

#include <optional>
#include <span>

#include "kneesight/ingest.hpp"

namespace kneesight {

struct DescriptorConfig {
  double ir_window_s = 10.0;            // voltage-drop window after discharge onset
  double eod_fraction = 0.1;            // final capacity fraction for the EOD slope
  double plateau_band_v_per_ah = 0.05;  // |dV/dQ| band defining the plateau
  double mid_fraction_lo = 0.25;        // mid-capacity window for curvature
  double mid_fraction_hi = 0.75;
  int min_samples = 5;  // minimum points for shape descriptors
};

// Trapezoidal integral of |I| dt over a discharge segment, in Ah.
double delivered_capacity(const Cycle& cycle);

// Trapezoidal integral of V * |I| dt over a discharge segment, in Wh.
double energy_throughput(const Cycle& cycle);

struct ShapeDescriptors {
  double dv_ir;          // V(onset) - V(onset + ir_window)
  double eod_slope;      // least-squares dV/dQ over the final capacity fraction
  double plateau_ah;     // capacity span with |dV/dQ| below the band
  double mid_curvature;  // mean second difference of V(Q) over the mid window
};

ShapeDescriptors shape_descriptors(const Cycle& cycle, const DescriptorConfig& cfg);

// Full per-cycle row. Descriptors that cannot be computed on a degenerate
// cycle are emitted as NaN (and logged); soh is NaN until trajectory
// assembly divides by Q0.
CycleRow featurize_cycle(const Cycle& cycle, const DescriptorConfig& cfg);

struct TrajectoryPoint {
  int cycle;
  double soh;
};

struct CapacityTrajectory {
  std::string cell_id;
  double q0 = 0;  // Ah
  std::vector<TrajectoryPoint> points;
  std::optional<int> eol_cycle;
  std::optional<int> knee_cycle;
  std::string dataset_tag;
};

enum class Q0Rule { first_cycle, rated };

// Assembles one cell's rows into a trajectory; soh = q_ah / Q0 where Q0 is
// the first observed cycle's capacity or the supplied rated value. Rows with
// missing q_ah are dropped (and counted in the log).
CapacityTrajectory build_trajectory(std::span<const CycleRow> rows,
                                    Q0Rule rule = Q0Rule::first_cycle,
                                    double rated_q0 = 0);

// Smallest cycle index whose soh drops strictly below the threshold
// (first-crossing rule, no hysteresis); absent if never crossed.
std::optional<int> detect_eol(const CapacityTrajectory& traj, double threshold = 0.80);

}  // namespace kneesight
