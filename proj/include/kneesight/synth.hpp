#pragma once

// Ground-truth synthetic data generator: two-phase capacity fade curves with
// known knee/EOL, population sampling with domain-shift controls, and
// Weibull lifetime draws. Serves as the brute-force oracle for detector and
// predictor tests.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kneesight/features.hpp"
#include "kneesight/reliability.hpp"

namespace kneesight {

struct TrajectorySpec {
  double q0 = 1.0;                // Ah
  double linear_rate = 0.0;       // a: SOH fraction lost per cycle
  std::optional<int> knee_cycle;  // k*: onset of accelerated fade
  double accel = 0.0;             // b: post-knee coefficient
  double post_knee_exponent = 2.0;
  double noise_sd = 0.0;          // SOH noise
  int length = 50;                // cycles 0 .. length-1
  std::uint64_t seed = 0;
};

struct GeneratedCell {
  TrajectorySpec spec;
  CapacityTrajectory trajectory;   // observed (noisy) trajectory
  std::vector<CycleRow> rows;      // same data in the per-cycle table schema
  std::optional<int> true_knee;    // k* when a bend exists inside the window
  std::optional<int> true_eol;     // analytic first SOH < 0.8 on the noiseless
                                   // curve; absent when beyond the window
};

// SOH(k) = 1 - a*k - b*max(0, k - k*)^p + eps_k, eps ~ N(0, noise_sd^2),
// clipped at 0. Deterministic per seed. trajectory.eol_cycle carries the
// observable (noisy) EOL; true_eol the noiseless ground truth.
GeneratedCell gen_trajectory(const TrajectorySpec& spec);

struct Range {
  double lo = 0, hi = 0;  // uniform draw; lo == hi pins a constant
};

struct PopulationSpec {
  int n_cells = 100;
  std::uint64_t seed = 0;
  std::string dataset_tag = "synthetic";
  Range q0{0.25, 0.30};
  Range linear_rate{0.004, 0.012};
  Range accel{0.008, 0.020};
  Range knee_cycle{6, 20};  // rounded to integer cycles
  double knee_prob = 1.0;   // fraction of cells with a knee
  Range noise_sd{0.002, 0.002};
  Range length{40, 40};
  double post_knee_exponent = 2.0;
  // Domain-shift offsets added to every cell's draws.
  double rate_shift = 0;
  double accel_shift = 0;
  double noise_shift = 0;
};

// Independent per-cell draws from seeded streams; cell ids are
// "<tag>_cell_<index>". Cycle rows carry uninformative per-cell stressor
// constants (mean current / temperature) so importance rankings have known
// noise features.
std::vector<GeneratedCell> gen_population(const PopulationSpec& spec);

// Inverse-transform Weibull sampling: x = lambda * (-ln U)^(1/k).
LifetimeSample gen_weibull(double shape, double scale, int n, std::uint64_t seed);

}  // namespace kneesight
