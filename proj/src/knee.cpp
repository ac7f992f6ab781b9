#include "kneesight/knee.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kneesight/log.hpp"

namespace kneesight {

namespace {

// Median of |kappa| over the first third of the series (at least one entry).
// The 1e-9 floor keeps the resolved threshold positive on flat series.
double resolve_tau(const std::vector<CurvaturePoint>& series, const KneeConfig& cfg) {
  if (cfg.tau) {
    if (!(*cfg.tau > 0) || !std::isfinite(*cfg.tau))
      throw std::invalid_argument("absolute tau must be positive and finite");
    return *cfg.tau;
  }
  const std::size_t m = std::max<std::size_t>(1, series.size() / 3);
  std::vector<double> mags;
  mags.reserve(m);
  for (std::size_t i = 0; i < m && i < series.size(); ++i)
    mags.push_back(std::fabs(series[i].kappa));
  std::sort(mags.begin(), mags.end());
  const std::size_t n = mags.size();
  const double median =
      n % 2 == 1 ? mags[n / 2] : 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
  return std::max(3.0 * median, 1e-9);
}

// Earliest cycle >= min_prefix with |kappa| >= tau, rejecting isolated
// exceedances: the next series entry (when one exists) must sustain at
// least tau/2 in the same direction. Adjacent difference-based curvature
// estimates of noise are anti-correlated, so an isolated blip typically
// flips sign at the next cycle while a real bend keeps it.
std::optional<int> scan_for_knee(const std::vector<CurvaturePoint>& series, double tau,
                                 int min_prefix) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i].cycle < min_prefix) continue;
    const double k0 = series[i].kappa;
    if (std::fabs(k0) < tau) continue;
    if (i + 1 < series.size()) {
      const double k1 = series[i + 1].kappa;
      if (std::fabs(k1) < 0.5 * tau || std::signbit(k1) != std::signbit(k0)) continue;
    }
    return static_cast<int>(std::llround(series[i].cycle));
  }
  return std::nullopt;
}

double signal_at(double d1, double d2, bool raw_second_derivative) {
  if (raw_second_derivative) return d2;
  return d2 / std::pow(1.0 + d1 * d1, 1.5);
}

// Curvature at every interior index of a smoothed series.
std::vector<CurvaturePoint> fd_curvature_series(
    const std::vector<std::pair<double, double>>& smoothed, bool raw_second_derivative) {
  std::vector<CurvaturePoint> out;
  if (smoothed.size() < 3) return out;
  out.reserve(smoothed.size() - 2);
  for (std::size_t k = 1; k + 1 < smoothed.size(); ++k) {
    const double h1 = smoothed[k].first - smoothed[k - 1].first;
    const double h2 = smoothed[k + 1].first - smoothed[k].first;
    if (!(h1 > 0) || !(h2 > 0))
      throw std::invalid_argument("cycle values must be strictly increasing");
    const double denom = h1 * h2 * (h1 + h2);
    const double yl = smoothed[k - 1].second, yc = smoothed[k].second,
                 yr = smoothed[k + 1].second;
    const double d1 = (h1 * h1 * yr + (h2 * h2 - h1 * h1) * yc - h2 * h2 * yl) / denom;
    const double d2 = 2.0 * (h1 * yr - (h1 + h2) * yc + h2 * yl) / denom;
    out.push_back({smoothed[k].first, signal_at(d1, d2, raw_second_derivative)});
  }
  return out;
}

// Analytic curvature of a fitted model on an integer cycle grid.
std::vector<CurvaturePoint> model_curvature_series(const InrModel& model, int first_cycle,
                                                   int last_cycle,
                                                   bool raw_second_derivative) {
  std::vector<CurvaturePoint> out;
  out.reserve(static_cast<std::size_t>(last_cycle - first_cycle + 1));
  for (int c = first_cycle; c <= last_cycle; ++c) {
    const std::vector<double> x{static_cast<double>(c)};
    const double d1 = derivative(model, x, 1);
    const double d2 = derivative(model, x, 2);
    out.push_back({static_cast<double>(c), signal_at(d1, d2, raw_second_derivative)});
  }
  return out;
}

std::vector<TrainingSample> trajectory_samples(const CapacityTrajectory& traj) {
  std::vector<TrainingSample> samples;
  samples.reserve(traj.points.size());
  for (const auto& p : traj.points)
    samples.push_back({{static_cast<double>(p.cycle)}, {p.soh}});
  return samples;
}

InrModel fit_capacity_model(const CapacityTrajectory& traj, const InrConfig& inr_cfg,
                            const TrainOptions& opts) {
  InrConfig cfg = inr_cfg;
  cfg.input_dim = 1;
  cfg.output_dim = 1;
  InrModel model = init_model(cfg);
  const auto samples = trajectory_samples(traj);
  train(model, samples, {}, opts);
  return model;
}

}  // namespace

std::string to_string(Smoother s) {
  switch (s) {
    case Smoother::moving_average: return "moving_average";
    case Smoother::inr_fit: return "inr_fit";
  }
  throw std::invalid_argument("unknown smoother");
}

Smoother smoother_from_string(const std::string& name) {
  if (name == "moving_average") return Smoother::moving_average;
  if (name == "inr_fit") return Smoother::inr_fit;
  throw std::invalid_argument("unknown smoother: " + name);
}

void validate(const KneeConfig& cfg) {
  if (cfg.window < 3 || cfg.window % 2 == 0)
    throw std::invalid_argument("smoothing window must be an odd integer >= 3");
  if (cfg.min_prefix < 1) throw std::invalid_argument("min_prefix must be >= 1");
  if (cfg.tau && (!(*cfg.tau > 0) || !std::isfinite(*cfg.tau)))
    throw std::invalid_argument("absolute tau must be positive and finite");
  if (cfg.smoother == Smoother::inr_fit) validate(cfg.inr);
}

std::vector<std::pair<double, double>> smooth_trajectory(const CapacityTrajectory& traj,
                                                         const KneeConfig& cfg) {
  validate(cfg);
  const auto& pts = traj.points;
  const std::size_t n = pts.size();
  std::vector<std::pair<double, double>> out;
  out.reserve(n);
  if (cfg.smoother == Smoother::moving_average) {
    if (n < static_cast<std::size_t>(cfg.window))
      throw std::invalid_argument("too few points for the moving-average window");
    const std::size_t half = static_cast<std::size_t>(cfg.window) / 2;
    for (std::size_t i = 0; i < n; ++i) {
      // Centered window; near the edges it shrinks symmetrically so the
      // average stays centered on point i.
      const std::size_t reach = std::min({half, i, n - 1 - i});
      double sum = 0;
      for (std::size_t j = i - reach; j <= i + reach; ++j) sum += pts[j].soh;
      out.emplace_back(static_cast<double>(pts[i].cycle),
                       sum / static_cast<double>(2 * reach + 1));
    }
    return out;
  }
  if (n < 4) throw std::invalid_argument("too few points for the inr_fit smoother");
  const InrModel model = fit_capacity_model(traj, cfg.inr, {});
  for (const auto& p : pts) {
    const std::vector<double> x{static_cast<double>(p.cycle)};
    out.emplace_back(static_cast<double>(p.cycle), forward(model, x)[0]);
  }
  return out;
}

double curvature(std::span<const std::pair<double, double>> series, std::size_t k) {
  if (series.size() < 3)
    throw std::invalid_argument("curvature needs at least three points");
  if (k == 0 || k + 1 >= series.size())
    throw std::invalid_argument("curvature is undefined at boundary indices");
  const double h1 = series[k].first - series[k - 1].first;
  const double h2 = series[k + 1].first - series[k].first;
  if (!(h1 > 0) || !(h2 > 0))
    throw std::invalid_argument("cycle values must be strictly increasing");
  const double denom = h1 * h2 * (h1 + h2);
  const double yl = series[k - 1].second, yc = series[k].second, yr = series[k + 1].second;
  const double d1 = (h1 * h1 * yr + (h2 * h2 - h1 * h1) * yc - h2 * h2 * yl) / denom;
  const double d2 = 2.0 * (h1 * yr - (h1 + h2) * yc + h2 * yl) / denom;
  return d2 / std::pow(1.0 + d1 * d1, 1.5);
}

KneeReport detect_knee(const CapacityTrajectory& traj, const KneeConfig& cfg) {
  validate(cfg);
  const std::size_t n = traj.points.size();
  const std::size_t smoother_min =
      cfg.smoother == Smoother::moving_average ? static_cast<std::size_t>(cfg.window) : 4;
  const std::size_t need =
      std::max(smoother_min, static_cast<std::size_t>(cfg.min_prefix) + 2);
  if (n < need) throw std::invalid_argument("trajectory too short for knee detection");

  KneeReport report;
  report.smoother_used = cfg.smoother;
  if (cfg.smoother == Smoother::moving_average) {
    const auto smoothed = smooth_trajectory(traj, cfg);
    report.curvature_series = fd_curvature_series(smoothed, cfg.raw_second_derivative);
  } else {
    const InrModel model = fit_capacity_model(traj, cfg.inr, {});
    report.curvature_series =
        model_curvature_series(model, traj.points.front().cycle,
                               traj.points.back().cycle, cfg.raw_second_derivative);
  }
  report.threshold_used = resolve_tau(report.curvature_series, cfg);
  report.knee_cycle = scan_for_knee(report.curvature_series, report.threshold_used,
                                    cfg.min_prefix);
  return report;
}

KneeReport early_life_knee(const CapacityTrajectory& prefix, const KneeConfig& cfg,
                           const InrConfig& inr_cfg) {
  validate(cfg);
  const std::size_t n = prefix.points.size();
  if (n < 4) throw std::invalid_argument("early-life knee needs at least 4 points");
  const int first = prefix.points.front().cycle;
  const int last_observed = prefix.points.back().cycle;
  if (last_observed <= first)
    throw std::invalid_argument("prefix cycles must span a positive range");
  // Extrapolation horizon: three prefix lengths past the first observed
  // cycle. The input normalization is pinned to the full horizon so the
  // model evaluates in-range when extrapolating.
  const int horizon = first + 3 * static_cast<int>(n);
  TrainOptions opts;
  opts.input_range = {{static_cast<double>(first), static_cast<double>(horizon)}};
  const InrModel model = fit_capacity_model(prefix, inr_cfg, opts);

  KneeReport report;
  report.smoother_used = Smoother::inr_fit;
  report.extrapolated = true;
  report.curvature_series =
      model_curvature_series(model, first, horizon, cfg.raw_second_derivative);
  report.threshold_used = resolve_tau(report.curvature_series, cfg);
  report.knee_cycle = scan_for_knee(report.curvature_series, report.threshold_used,
                                    cfg.min_prefix);
  return report;
}

}  // namespace kneesight
