#include "kneesight/features.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kneesight/log.hpp"

namespace kneesight {

namespace {

void require_discharge(const Cycle& cycle, const char* op) {
  if (cycle.kind != CycleKind::discharge)
    throw std::invalid_argument(std::string(op) + " requires a discharge cycle");
}

// Cumulative trapezoidal capacity (Ah) at every sample; q.front() == 0.
std::vector<double> capacity_prefix(const Cycle& cycle) {
  const auto& s = cycle.samples;
  std::vector<double> q(s.size(), 0.0);
  for (std::size_t i = 1; i < s.size(); ++i) {
    double dt = s[i].t_s - s[i - 1].t_s;
    q[i] = q[i - 1] +
           0.5 * (std::abs(s[i].current_a) + std::abs(s[i - 1].current_a)) * dt / 3600.0;
  }
  return q;
}

}  // namespace

double delivered_capacity(const Cycle& cycle) {
  require_discharge(cycle, "delivered_capacity");
  if (cycle.samples.size() < 2)
    throw std::invalid_argument("delivered_capacity needs at least 2 samples");
  return capacity_prefix(cycle).back();
}

double energy_throughput(const Cycle& cycle) {
  require_discharge(cycle, "energy_throughput");
  const auto& s = cycle.samples;
  if (s.size() < 2) throw std::invalid_argument("energy_throughput needs at least 2 samples");
  double wh = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    double p0 = s[i - 1].voltage_v * std::abs(s[i - 1].current_a);
    double p1 = s[i].voltage_v * std::abs(s[i].current_a);
    wh += 0.5 * (p0 + p1) * (s[i].t_s - s[i - 1].t_s) / 3600.0;
  }
  return wh;
}

ShapeDescriptors shape_descriptors(const Cycle& cycle, const DescriptorConfig& cfg) {
  require_discharge(cycle, "shape_descriptors");
  const auto& s = cycle.samples;
  if (s.size() < static_cast<std::size_t>(cfg.min_samples))
    throw std::invalid_argument("shape_descriptors needs at least min_samples points");

  ShapeDescriptors d{};

  // IR drop: voltage at onset minus interpolated voltage ir_window later.
  double t_target = s.front().t_s + cfg.ir_window_s;
  if (t_target > s.back().t_s)
    throw std::invalid_argument("ir_window exceeds segment duration");
  double v_at = s.back().voltage_v;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i].t_s >= t_target) {
      double t0 = s[i - 1].t_s, t1 = s[i].t_s;
      double w = t1 > t0 ? (t_target - t0) / (t1 - t0) : 0.0;
      v_at = s[i - 1].voltage_v + w * (s[i].voltage_v - s[i - 1].voltage_v);
      break;
    }
  }
  d.dv_ir = s.front().voltage_v - v_at;

  std::vector<double> q = capacity_prefix(cycle);
  double q_total = q.back();
  if (!(q_total > 0)) throw std::invalid_argument("degenerate zero-capacity cycle");

  // End-of-discharge slope: least squares of V on Q over the final fraction.
  std::size_t n = s.size();
  std::size_t start = 0;
  while (start < n && q[start] < (1.0 - cfg.eod_fraction) * q_total) ++start;
  if (start > n - 2) start = n - 2;  // always regress on >= 2 points
  double mq = 0, mv = 0;
  std::size_t m = n - start;
  for (std::size_t i = start; i < n; ++i) {
    mq += q[i];
    mv += s[i].voltage_v;
  }
  mq /= static_cast<double>(m);
  mv /= static_cast<double>(m);
  double sxy = 0, sxx = 0;
  for (std::size_t i = start; i < n; ++i) {
    sxy += (q[i] - mq) * (s[i].voltage_v - mv);
    sxx += (q[i] - mq) * (q[i] - mq);
  }
  d.eod_slope = sxx > 0 ? sxy / sxx : std::nan("");

  // Plateau: capacity span of intervals where |dV/dQ| stays inside the band.
  d.plateau_ah = 0;
  for (std::size_t i = 1; i < n; ++i) {
    double dq = q[i] - q[i - 1];
    if (dq <= 0) continue;
    double slope = (s[i].voltage_v - s[i - 1].voltage_v) / dq;
    if (std::abs(slope) < cfg.plateau_band_v_per_ah) d.plateau_ah += dq;
  }

  // Mid-capacity curvature: mean 3-point second derivative of V(Q), exact
  // for quadratics on a non-uniform grid.
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (q[i] < cfg.mid_fraction_lo * q_total || q[i] > cfg.mid_fraction_hi * q_total) continue;
    double h1 = q[i] - q[i - 1], h2 = q[i + 1] - q[i];
    if (h1 <= 0 || h2 <= 0) continue;
    double num = s[i - 1].voltage_v * h2 - s[i].voltage_v * (h1 + h2) + s[i + 1].voltage_v * h1;
    sum += 2.0 * num / (h1 * h2 * (h1 + h2));
    ++count;
  }
  d.mid_curvature = count > 0 ? sum / static_cast<double>(count) : std::nan("");

  return d;
}

CycleRow featurize_cycle(const Cycle& cycle, const DescriptorConfig& cfg) {
  CycleRow row;
  row.cell_id = cycle.cell_id;
  row.cycle_index = cycle.cycle_index;
  row.dataset_tag = cycle.dataset_tag;
  row.q_ah = delivered_capacity(cycle);
  row.e_wh = energy_throughput(cycle);
  row.soh = std::nan("");  // filled once Q0 is known (build_trajectory)
  try {
    ShapeDescriptors d = shape_descriptors(cycle, cfg);
    row.dv_ir = d.dv_ir;
    row.eod_slope = d.eod_slope;
    row.plateau_ah = d.plateau_ah;
    row.mid_curvature = d.mid_curvature;
  } catch (const std::invalid_argument& e) {
    std::ostringstream msg;
    msg << "cell " << cycle.cell_id << " cycle " << cycle.cycle_index
        << ": shape descriptors dropped (" << e.what() << ")";
    log_info(msg.str());
    row.dv_ir = row.eod_slope = row.plateau_ah = row.mid_curvature = std::nan("");
  }
  double isum = 0, tsum = 0;
  std::size_t tcount = 0;
  for (const auto& s : cycle.samples) {
    isum += s.current_a;
    if (!std::isnan(s.temp_c)) {
      tsum += s.temp_c;
      ++tcount;
    }
  }
  row.mean_current_a = isum / static_cast<double>(cycle.samples.size());
  row.mean_temp_c = tcount > 0 ? tsum / static_cast<double>(tcount) : std::nan("");
  return row;
}

CapacityTrajectory build_trajectory(std::span<const CycleRow> rows, Q0Rule rule,
                                    double rated_q0) {
  if (rows.empty()) throw std::invalid_argument("build_trajectory needs at least 1 row");
  const std::string& id = rows.front().cell_id;
  std::vector<const CycleRow*> usable;
  std::size_t dropped = 0;
  for (const auto& r : rows) {
    if (r.cell_id != id)
      throw std::invalid_argument("build_trajectory received mixed cell ids: '" + id +
                                  "' and '" + r.cell_id + "'");
    if (std::isnan(r.q_ah)) {
      ++dropped;
      continue;
    }
    usable.push_back(&r);
  }
  if (dropped > 0)
    log_info("cell " + id + ": dropped " + std::to_string(dropped) + " rows with missing q_ah");
  if (usable.empty()) throw std::invalid_argument("cell " + id + ": no rows with capacity");
  std::sort(usable.begin(), usable.end(),
            [](const CycleRow* a, const CycleRow* b) { return a->cycle_index < b->cycle_index; });
  for (std::size_t i = 1; i < usable.size(); ++i)
    if (usable[i]->cycle_index == usable[i - 1]->cycle_index)
      throw std::invalid_argument("cell " + id + ": duplicate cycle_index " +
                                  std::to_string(usable[i]->cycle_index));

  CapacityTrajectory traj;
  traj.cell_id = id;
  traj.dataset_tag = rows.front().dataset_tag;
  traj.q0 = (rule == Q0Rule::first_cycle) ? usable.front()->q_ah : rated_q0;
  if (!(traj.q0 > 0)) throw std::invalid_argument("cell " + id + ": Q0 must be > 0");
  traj.points.reserve(usable.size());
  for (const auto* r : usable) traj.points.push_back({r->cycle_index, r->q_ah / traj.q0});
  return traj;
}

std::optional<int> detect_eol(const CapacityTrajectory& traj, double threshold) {
  if (traj.points.empty()) throw std::invalid_argument("detect_eol needs a non-empty trajectory");
  for (const auto& p : traj.points)
    if (p.soh < threshold) return p.cycle;
  return std::nullopt;
}

}  // namespace kneesight
