#include <doctest.h>

#include <cmath>
#include <vector>

#include "kneesight/features.hpp"

using namespace kneesight;

namespace {

// Constant-current discharge: I = -amps for duration_s at dt spacing, with a
// caller-supplied voltage profile V(t).
template <typename VoltageFn>
Cycle cc_discharge(double amps, double duration_s, double dt, VoltageFn v_of_t) {
  Cycle c;
  c.cell_id = "f";
  c.kind = CycleKind::discharge;
  for (double t = 0; t <= duration_s + 1e-9; t += dt)
    c.samples.push_back({t, -amps, v_of_t(t), std::nan("")});
  return c;
}

}  // namespace

TEST_CASE("delivered_capacity: rectangle, zero, and triangle integrals") {
  auto flat = cc_discharge(1.0, 3600, 60, [](double) { return 3.6; });
  CHECK(delivered_capacity(flat) == doctest::Approx(1.0).epsilon(1e-12));

  auto zero = cc_discharge(0.0, 3600, 60, [](double) { return 3.6; });
  CHECK(delivered_capacity(zero) == 0.0);

  // Triangular ramp 0 -> 2 A over 3600 s at dt = 1 s; reference is the
  // trapezoid sum computed independently here.
  Cycle tri;
  tri.cell_id = "f";
  tri.kind = CycleKind::discharge;
  for (int t = 0; t <= 3600; ++t)
    tri.samples.push_back({double(t), -2.0 * t / 3600.0, 3.6, std::nan("")});
  double ref = 0;
  for (std::size_t i = 1; i < tri.samples.size(); ++i)
    ref += 0.5 *
           (std::abs(tri.samples[i].current_a) + std::abs(tri.samples[i - 1].current_a)) *
           (tri.samples[i].t_s - tri.samples[i - 1].t_s) / 3600.0;
  CHECK(delivered_capacity(tri) == doctest::Approx(ref).epsilon(1e-14));
  CHECK(delivered_capacity(tri) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("delivered_capacity rejects charge cycles and short segments") {
  Cycle c = cc_discharge(1.0, 3600, 60, [](double) { return 3.6; });
  c.kind = CycleKind::charge;
  CHECK_THROWS_AS(delivered_capacity(c), std::invalid_argument);
  Cycle one;
  one.kind = CycleKind::discharge;
  one.samples.push_back({0, -1, 3.6, std::nan("")});
  CHECK_THROWS_AS(delivered_capacity(one), std::invalid_argument);
}

TEST_CASE("energy_throughput: constants and linear voltage") {
  auto flat = cc_discharge(1.0, 3600, 60, [](double) { return 3.6; });
  CHECK(energy_throughput(flat) == doctest::Approx(3.6).epsilon(1e-12));

  auto zero = cc_discharge(0.0, 3600, 60, [](double) { return 3.6; });
  CHECK(energy_throughput(zero) == 0.0);

  // V falls linearly 4.2 -> 3.0 at constant 1 A: mean voltage 3.6 V -> 3.6 Wh.
  auto lin = cc_discharge(1.0, 3600, 1, [](double t) { return 4.2 - 1.2 * t / 3600.0; });
  CHECK(energy_throughput(lin) == doctest::Approx(3.6).epsilon(1e-12));
}

TEST_CASE("integrals are invariant under collinear sample refinement") {
  // Constant current, piecewise-linear voltage: the integrands are piecewise
  // linear, so trapezoids are exact and refinement must not move them.
  auto coarse = cc_discharge(1.5, 3600, 300, [](double t) {
    return t < 1800 ? 4.2 - 0.4 * t / 1800.0 : 3.8 - 0.8 * (t - 1800) / 1800.0;
  });
  Cycle fine;
  fine.cell_id = coarse.cell_id;
  fine.kind = coarse.kind;
  for (std::size_t i = 0; i < coarse.samples.size(); ++i) {
    fine.samples.push_back(coarse.samples[i]);
    if (i + 1 < coarse.samples.size()) {
      const auto& a = coarse.samples[i];
      const auto& b = coarse.samples[i + 1];
      fine.samples.push_back(
          {0.5 * (a.t_s + b.t_s), 0.5 * (a.current_a + b.current_a),
           0.5 * (a.voltage_v + b.voltage_v), std::nan("")});
    }
  }
  CHECK(std::abs(delivered_capacity(fine) - delivered_capacity(coarse)) <
        1e-12 * delivered_capacity(coarse));
  CHECK(std::abs(energy_throughput(fine) - energy_throughput(coarse)) <
        1e-12 * energy_throughput(coarse));
}

TEST_CASE("shape_descriptors: flat and linear voltage curves") {
  DescriptorConfig cfg;
  auto flat = cc_discharge(1.0, 3600, 30, [](double) { return 3.6; });
  auto d = shape_descriptors(flat, cfg);
  CHECK(d.eod_slope == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(d.plateau_ah == doctest::Approx(delivered_capacity(flat)).epsilon(1e-12));
  CHECK(std::abs(d.mid_curvature) < 1e-9);
  CHECK(d.dv_ir == doctest::Approx(0.0).epsilon(1e-12));

  // Strictly linear V(Q) with |slope| 1.2 V/Ah > band 0.05.
  auto lin = cc_discharge(1.0, 3600, 30, [](double t) { return 4.2 - 1.2 * t / 3600.0; });
  d = shape_descriptors(lin, cfg);
  CHECK(std::abs(d.mid_curvature) < 1e-6);
  CHECK(d.plateau_ah == 0.0);
  CHECK(d.eod_slope == doctest::Approx(-1.2).epsilon(1e-9));
}

TEST_CASE("shape_descriptors: two-phase analytic fixture") {
  // V(Q) = 4.2 - 0.5 Q - 2 max(0, Q - 0.8)^2 on Q in [0, 1] (1 A for 1 h).
  DescriptorConfig cfg;
  auto cyc = cc_discharge(1.0, 3600, 5, [](double t) {
    double q = t / 3600.0;
    double v = 4.2 - 0.5 * q;
    if (q > 0.8) v -= 2.0 * (q - 0.8) * (q - 0.8);
    return v;
  });
  auto d = shape_descriptors(cyc, cfg);
  CHECK(d.eod_slope < -0.5);       // analytic slope in [-1.3, -0.9] on the tail
  CHECK(d.eod_slope > -1.3);
  CHECK(d.plateau_ah == 0.0);      // |dV/dQ| >= 0.5 everywhere
  CHECK(std::abs(d.mid_curvature) < 1e-6);  // bend sits outside [0.25, 0.75]
  // IR window 10 s: V drop = 0.5 V/Ah * (10/3600) Ah.
  CHECK(d.dv_ir == doctest::Approx(0.5 * 10.0 / 3600.0).epsilon(1e-6));
}

TEST_CASE("shape_descriptors error cases") {
  DescriptorConfig cfg;
  auto tiny = cc_discharge(1.0, 8, 2, [](double) { return 3.6; });  // 5 samples, 8 s long
  CHECK_THROWS_WITH_AS(shape_descriptors(tiny, cfg), "ir_window exceeds segment duration",
                       std::invalid_argument);
  auto rest = cc_discharge(0.0, 3600, 60, [](double) { return 3.6; });
  CHECK_THROWS_WITH_AS(shape_descriptors(rest, cfg), "degenerate zero-capacity cycle",
                       std::invalid_argument);
  Cycle four = cc_discharge(1.0, 30, 10, [](double) { return 3.6; });
  CHECK_THROWS_AS(shape_descriptors(four, cfg), std::invalid_argument);  // < min_samples
}

TEST_CASE("featurize_cycle fills NaN descriptors on degenerate cycles") {
  DescriptorConfig cfg;
  auto short_cycle = cc_discharge(1.0, 6, 1, [](double) { return 3.6; });  // < ir_window
  auto row = featurize_cycle(short_cycle, cfg);
  CHECK(row.q_ah > 0);
  CHECK(std::isnan(row.dv_ir));
  CHECK(std::isnan(row.eod_slope));
  CHECK(std::isnan(row.soh));
  CHECK(row.mean_current_a == doctest::Approx(-1.0));
  CHECK(std::isnan(row.mean_temp_c));
}

namespace {
CycleRow qrow(const std::string& id, int cycle, double q) {
  CycleRow r;
  r.cell_id = id;
  r.cycle_index = cycle;
  r.q_ah = q;
  return r;
}
}  // namespace

TEST_CASE("build_trajectory: SOH normalisation") {
  SUBCASE("single cycle at q0 gives soh 1.0") {
    std::vector<CycleRow> rows = {qrow("c", 0, 1.1)};
    auto t = build_trajectory(rows);
    REQUIRE(t.points.size() == 1);
    CHECK(t.points[0].soh == 1.0);
    CHECK(t.q0 == 1.1);
  }
  SUBCASE("q sequence divides by first-cycle capacity") {
    std::vector<CycleRow> rows = {qrow("c", 0, 1.0), qrow("c", 1, 0.9), qrow("c", 2, 0.79)};
    auto t = build_trajectory(rows);
    CHECK(t.points[0].soh == 1.0);
    CHECK(t.points[1].soh == 0.9);
    CHECK(t.points[2].soh == 0.79);
  }
  SUBCASE("rated override and inverse q0 scaling") {
    std::vector<CycleRow> rows = {qrow("c", 0, 1.0), qrow("c", 1, 0.8)};
    auto t1 = build_trajectory(rows, Q0Rule::rated, 1.0);
    auto t2 = build_trajectory(rows, Q0Rule::rated, 2.0);
    for (std::size_t i = 0; i < t1.points.size(); ++i)
      CHECK(t2.points[i].soh == doctest::Approx(0.5 * t1.points[i].soh).epsilon(1e-15));
  }
  SUBCASE("points are sorted and duplicate indices rejected") {
    std::vector<CycleRow> rows = {qrow("c", 2, 0.8), qrow("c", 0, 1.0), qrow("c", 1, 0.9)};
    auto t = build_trajectory(rows);
    CHECK(t.points[0].cycle == 0);
    CHECK(t.points[2].cycle == 2);
    CHECK(t.q0 == 1.0);  // q0 comes from the smallest cycle index
    rows.push_back(qrow("c", 1, 0.85));
    CHECK_THROWS_AS(build_trajectory(rows), std::invalid_argument);
  }
  SUBCASE("mixed cells and bad q0 are errors") {
    std::vector<CycleRow> rows = {qrow("a", 0, 1.0), qrow("b", 1, 0.9)};
    CHECK_THROWS_AS(build_trajectory(rows), std::invalid_argument);
    std::vector<CycleRow> rows2 = {qrow("a", 0, 1.0)};
    CHECK_THROWS_AS(build_trajectory(rows2, Q0Rule::rated, 0.0), std::invalid_argument);
  }
}

TEST_CASE("detect_eol: first strict crossing below threshold") {
  CapacityTrajectory t;
  t.cell_id = "c";
  t.q0 = 1;
  t.points = {{0, 1.0}, {1, 0.85}, {2, 0.79}, {3, 0.70}};
  CHECK(detect_eol(t) == 2);

  CapacityTrajectory alive;
  alive.cell_id = "c";
  alive.q0 = 1;
  alive.points = {{0, 1.0}, {1, 0.9}, {2, 0.81}, {3, 0.80}};
  CHECK(!detect_eol(alive).has_value());  // 0.80 is not strictly below

  // Monotone in threshold: raising it never yields a later EOL.
  std::vector<double> thresholds = {0.7, 0.75, 0.8, 0.85, 0.9};
  for (std::size_t i = 0; i + 1 < thresholds.size(); ++i) {
    auto lo = detect_eol(t, thresholds[i]);
    auto hi = detect_eol(t, thresholds[i + 1]);
    if (lo.has_value()) {
      REQUIRE(hi.has_value());
      CHECK(*hi <= *lo);
    }
  }
}
