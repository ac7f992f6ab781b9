#include "kneesight/synth.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kneesight/rng.hpp"

namespace kneesight {

namespace {

double clean_soh(const TrajectorySpec& spec, double k) {
  double soh = 1.0 - spec.linear_rate * k;
  if (spec.knee_cycle && k > *spec.knee_cycle)
    soh -= spec.accel * std::pow(k - *spec.knee_cycle, spec.post_knee_exponent);
  return soh;
}

// Real-valued first crossing of SOH = 0.8 on the noiseless curve, or NaN if
// the curve never crosses. Closed form for the default quadratic branch,
// bisection for other exponents.
double analytic_crossing(const TrajectorySpec& spec) {
  const double drop = 0.2;
  double a = spec.linear_rate;
  if (!spec.knee_cycle || spec.accel <= 0) {
    return a > 0 ? drop / a : std::nan("");
  }
  double kstar = *spec.knee_cycle;
  if (a > 0 && drop / a <= kstar) return drop / a;  // crosses on the linear branch
  double residual = drop - a * kstar;  // fade still needed at the knee
  double b = spec.accel;
  if (spec.post_knee_exponent == 2.0) {
    double disc = a * a + 4.0 * b * residual;
    return kstar + (-a + std::sqrt(disc)) / (2.0 * b);
  }
  // General exponent: SOH is strictly decreasing past the knee; bisect.
  auto f = [&](double k) { return clean_soh(spec, k) - 0.8; };
  double lo = kstar, hi = kstar + 1;
  while (f(hi) > 0) {
    hi = kstar + 2 * (hi - kstar);
    if (hi > 1e9) return std::nan("");
  }
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (f(mid) > 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

GeneratedCell gen_trajectory(const TrajectorySpec& spec) {
  if (spec.length < 1) throw std::invalid_argument("trajectory length must be >= 1");
  if (spec.linear_rate < 0 || spec.accel < 0 || spec.noise_sd < 0)
    throw std::invalid_argument("rates and noise_sd must be >= 0");

  GeneratedCell cell;
  cell.spec = spec;
  cell.trajectory.cell_id = "synthetic";
  cell.trajectory.q0 = spec.q0;
  Rng noise(derive_seed(spec.seed, 0x5e71));
  cell.trajectory.points.reserve(static_cast<std::size_t>(spec.length));
  for (int k = 0; k < spec.length; ++k) {
    double soh = clean_soh(spec, k);
    if (spec.noise_sd > 0) soh += noise.normal(0.0, spec.noise_sd);
    soh = std::max(soh, 0.0);
    cell.trajectory.points.push_back({k, soh});
  }

  cell.trajectory.eol_cycle = detect_eol(cell.trajectory);

  if (spec.knee_cycle && spec.accel > 0 && *spec.knee_cycle < spec.length)
    cell.true_knee = spec.knee_cycle;
  double crossing = analytic_crossing(spec);
  if (!std::isnan(crossing) && crossing < spec.length - 1 + 0.5) {
    // First integer cycle strictly past the crossing (SOH == 0.8 exactly at
    // an integer does not count as "below").
    int eol = static_cast<int>(std::floor(crossing)) + 1;
    if (eol < spec.length) cell.true_eol = eol;
  }
  return cell;
}

std::vector<GeneratedCell> gen_population(const PopulationSpec& spec) {
  if (spec.n_cells < 1) throw std::invalid_argument("n_cells must be >= 1");
  std::vector<GeneratedCell> cells;
  cells.reserve(static_cast<std::size_t>(spec.n_cells));
  for (int i = 0; i < spec.n_cells; ++i) {
    Rng draw(derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
    // Fixed draw order keeps streams aligned regardless of branch outcomes.
    double q0 = draw.uniform(spec.q0.lo, spec.q0.hi);
    double rate = draw.uniform(spec.linear_rate.lo, spec.linear_rate.hi) + spec.rate_shift;
    double accel = draw.uniform(spec.accel.lo, spec.accel.hi) + spec.accel_shift;
    double kstar = draw.uniform(spec.knee_cycle.lo, spec.knee_cycle.hi);
    double has_knee = draw.uniform01();
    double noise = draw.uniform(spec.noise_sd.lo, spec.noise_sd.hi) + spec.noise_shift;
    double length = draw.uniform(spec.length.lo, spec.length.hi);
    double stress_current = -draw.uniform(0.5, 1.5);
    double stress_temp = draw.uniform(23.0, 27.0);

    TrajectorySpec ts;
    ts.q0 = q0;
    ts.linear_rate = std::max(rate, 0.0);
    ts.accel = std::max(accel, 0.0);
    if (has_knee < spec.knee_prob) ts.knee_cycle = static_cast<int>(std::lround(kstar));
    ts.post_knee_exponent = spec.post_knee_exponent;
    ts.noise_sd = std::max(noise, 0.0);
    ts.length = std::max(1, static_cast<int>(std::lround(length)));
    ts.seed = derive_seed(spec.seed, 0x700000000ULL + static_cast<std::uint64_t>(i));

    GeneratedCell cell = gen_trajectory(ts);
    std::ostringstream id;
    id << spec.dataset_tag << "_cell_" << i;
    cell.trajectory.cell_id = id.str();
    cell.trajectory.dataset_tag = spec.dataset_tag;

    cell.rows.reserve(cell.trajectory.points.size());
    for (const auto& p : cell.trajectory.points) {
      CycleRow row;
      row.cell_id = cell.trajectory.cell_id;
      row.cycle_index = p.cycle;
      row.q_ah = p.soh * q0;
      row.soh = p.soh;
      row.e_wh = row.q_ah * 3.7;  // nominal-voltage energy
      row.dv_ir = row.eod_slope = row.plateau_ah = row.mid_curvature = std::nan("");
      row.mean_current_a = stress_current;
      row.mean_temp_c = stress_temp;
      row.dataset_tag = spec.dataset_tag;
      cell.rows.push_back(std::move(row));
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

LifetimeSample gen_weibull(double shape, double scale, int n, std::uint64_t seed) {
  if (!(shape > 0) || !(scale > 0)) throw std::invalid_argument("weibull parameters must be > 0");
  if (n < 1) throw std::invalid_argument("n must be >= 1");
  LifetimeSample sample;
  sample.values.reserve(static_cast<std::size_t>(n));
  Rng rng(derive_seed(seed, 0x3e1b));
  for (int i = 0; i < n; ++i) {
    double u = 1.0 - rng.uniform01();  // (0, 1]
    sample.values.push_back({scale * std::pow(-std::log(u), 1.0 / shape), false});
  }
  return sample;
}

}  // namespace kneesight
