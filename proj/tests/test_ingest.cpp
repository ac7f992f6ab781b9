#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "kneesight/csv.hpp"
#include "kneesight/ingest.hpp"

using namespace kneesight;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ChannelMapping basic_mapping() {
  ChannelMapping m;
  m.cell_id_col = "cell";
  m.time_col = "t";
  m.current_col = "i";
  m.voltage_col = "v";
  return m;
}

RawTimeSeries square_wave(int blocks, double block_s = 3600, double dt = 60) {
  // Alternating +1 A / -1 A blocks starting with charge.
  RawTimeSeries s;
  s.cell_id = "sq";
  int per_block = static_cast<int>(block_s / dt);
  for (int b = 0; b < blocks; ++b) {
    double amps = (b % 2 == 0) ? 1.0 : -1.0;
    for (int k = 0; k < per_block; ++k)
      s.samples.push_back({b * block_s + k * dt, amps, 3.6, std::nan("")});
  }
  return s;
}

}  // namespace

TEST_CASE("load_timeseries: identity pass-through of a 3-row single-cell file") {
  TempDir dir("kneesight_ingest1");
  csv::write_text(dir.path / "raw.csv",
                  "cell,t,i,v\nA,0,-1.0,3.7\nA,1,-1.1,3.6\nA,2,-1.2,3.5\n");
  auto series = load_timeseries(dir.path / "raw.csv", basic_mapping());
  REQUIRE(series.size() == 1);
  REQUIRE(series[0].samples.size() == 3);
  CHECK(series[0].cell_id == "A");
  CHECK(series[0].samples[1].t_s == 1.0);
  CHECK(series[0].samples[1].current_a == -1.1);
  CHECK(series[0].samples[1].voltage_v == 3.6);
  CHECK(std::isnan(series[0].samples[1].temp_c));
}

TEST_CASE("load_timeseries: milliamp scaling divides currents by 1000") {
  TempDir dir("kneesight_ingest2");
  csv::write_text(dir.path / "raw.csv", "cell,t,i,v\nA,0,-1500,3.7\nA,1,-2000,3.6\n");
  auto mapping = basic_mapping();
  mapping.current_scale = 0.001;
  auto series = load_timeseries(dir.path / "raw.csv", mapping);
  CHECK(series[0].samples[0].current_a == -1.5);
  CHECK(series[0].samples[1].current_a == -2.0);
}

TEST_CASE("load_timeseries: interleaved cells split into time-sorted series") {
  TempDir dir("kneesight_ingest3");
  csv::write_text(dir.path / "raw.csv",
                  "cell,t,i,v\n"
                  "A,2,-1.0,3.5\nB,0,-2.0,3.9\nA,0,-1.0,3.7\nB,1,-2.0,3.8\nA,1,-1.0,3.6\nB,2,-2.0,3.7\n");
  auto series = load_timeseries(dir.path / "raw.csv", basic_mapping());
  REQUIRE(series.size() == 2);
  CHECK(series[0].cell_id == "A");  // first-appearance order
  CHECK(series[1].cell_id == "B");
  for (const auto& s : series) {
    REQUIRE(s.samples.size() == 3);
    CHECK(s.samples[0].t_s < s.samples[1].t_s);
    CHECK(s.samples[1].t_s < s.samples[2].t_s);
  }
  CHECK(series[0].samples[2].voltage_v == 3.5);
  CHECK(series[1].samples[0].voltage_v == 3.9);
}

TEST_CASE("load_timeseries: hard errors carry row context") {
  TempDir dir("kneesight_ingest4");
  SUBCASE("missing mandatory column") {
    csv::write_text(dir.path / "raw.csv", "cell,t,v\nA,0,3.7\n");
    CHECK_THROWS_WITH_AS(load_timeseries(dir.path / "raw.csv", basic_mapping()),
                         "missing column: i", std::invalid_argument);
  }
  SUBCASE("duplicate timestamp names the row") {
    csv::write_text(dir.path / "raw.csv", "cell,t,i,v\nA,0,-1,3.7\nA,1,-1,3.6\nA,1,-1,3.5\n");
    try {
      load_timeseries(dir.path / "raw.csv", basic_mapping());
      FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("row 3") != std::string::npos);
      CHECK(std::string(e.what()).find("duplicate timestamp") != std::string::npos);
    }
  }
  SUBCASE("unparseable numeric cell") {
    csv::write_text(dir.path / "raw.csv", "cell,t,i,v\nA,0,oops,3.7\n");
    try {
      load_timeseries(dir.path / "raw.csv", basic_mapping());
      FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
  }
}

TEST_CASE("load_timeseries: discharge_sign=positive flips currents") {
  TempDir dir("kneesight_ingest5");
  csv::write_text(dir.path / "raw.csv", "cell,t,i,v\nA,0,2.0,3.7\nA,1,2.0,3.6\n");
  auto mapping = basic_mapping();
  mapping.discharge_negative = false;
  auto series = load_timeseries(dir.path / "raw.csv", mapping);
  CHECK(series[0].samples[0].current_a == -2.0);
}

TEST_CASE("segment_cycles: constant discharge current is one cycle") {
  RawTimeSeries s;
  s.cell_id = "c";
  for (int k = 0; k < 50; ++k) s.samples.push_back({k * 1.0, -1.0, 3.6, std::nan("")});
  auto cycles = segment_cycles(s, {});
  REQUIRE(cycles.size() == 1);
  CHECK(cycles[0].kind == CycleKind::discharge);
  CHECK(cycles[0].cycle_index == 0);
  CHECK(cycles[0].samples.size() == 50);
}

TEST_CASE("segment_cycles: 3x square wave gives 3 charge + 3 discharge") {
  auto cycles = segment_cycles(square_wave(6), {});
  int charges = 0, discharges = 0;
  for (const auto& c : cycles) (c.kind == CycleKind::charge ? charges : discharges)++;
  CHECK(charges == 3);
  CHECK(discharges == 3);
  // Discharge cycles numbered 0,1,2 in time order.
  std::vector<int> d_idx;
  for (const auto& c : cycles)
    if (c.kind == CycleKind::discharge) d_idx.push_back(c.cycle_index);
  CHECK(d_idx == std::vector<int>{0, 1, 2});
}

TEST_CASE("segment_cycles: rest-only record yields empty list") {
  RawTimeSeries s;
  s.cell_id = "c";
  for (int k = 0; k < 30; ++k) s.samples.push_back({k * 1.0, 0.005, 3.6, std::nan("")});
  CHECK(segment_cycles(s, {}).empty());
}

TEST_CASE("segment_cycles: runs shorter than min_segment_samples are skipped") {
  RawTimeSeries s;
  s.cell_id = "c";
  for (int k = 0; k < 5; ++k) s.samples.push_back({k * 1.0, -1.0, 3.6, std::nan("")});
  for (int k = 5; k < 30; ++k) s.samples.push_back({k * 1.0, 0.0, 3.6, std::nan("")});
  SegmentationConfig cfg;
  cfg.min_segment_samples = 10;
  CHECK(segment_cycles(s, cfg).empty());
  cfg.min_segment_samples = 2;
  CHECK(segment_cycles(s, cfg).size() == 1);
}

TEST_CASE("segment_cycles: empty series is an error") {
  RawTimeSeries s;
  s.cell_id = "c";
  CHECK_THROWS_AS(segment_cycles(s, {}), std::invalid_argument);
}

TEST_CASE("segmentation properties: idempotence, coverage, shift invariance") {
  auto series = square_wave(6);
  // Sprinkle rest periods between blocks.
  RawTimeSeries with_rest;
  with_rest.cell_id = series.cell_id;
  double shift = 0;
  for (std::size_t i = 0; i < series.samples.size(); ++i) {
    if (i > 0 && i % 60 == 0) {
      for (int r = 0; r < 7; ++r) {
        with_rest.samples.push_back(
            {series.samples[i - 1].t_s + shift + (r + 1) * 5.0, 0.0, 3.6, std::nan("")});
      }
      shift += 40.0;
    }
    auto s = series.samples[i];
    s.t_s += shift;
    with_rest.samples.push_back(s);
  }
  auto cycles = segment_cycles(with_rest, {});
  REQUIRE(cycles.size() == 6);

  // Every sample lands in at most one cycle.
  std::size_t covered = 0;
  for (const auto& c : cycles) covered += c.samples.size();
  CHECK(covered <= with_rest.samples.size());

  // Idempotence: re-segmenting the original record reproduces identical
  // boundaries (cycles plus rests partition the record in time order).
  auto again = segment_cycles(with_rest, {});
  REQUIRE(again.size() == cycles.size());
  for (std::size_t i = 0; i < cycles.size(); ++i) {
    CHECK(again[i].kind == cycles[i].kind);
    CHECK(again[i].cycle_index == cycles[i].cycle_index);
    CHECK(again[i].samples.front().t_s == cycles[i].samples.front().t_s);
    CHECK(again[i].samples.back().t_s == cycles[i].samples.back().t_s);
  }

  // Uniform time shift leaves the cycle count invariant.
  RawTimeSeries shifted = with_rest;
  for (auto& s : shifted.samples) s.t_s += 1e6;
  CHECK(segment_cycles(shifted, {}).size() == cycles.size());
}

TEST_CASE("cycle table round trip: empty, single row, NaN preservation") {
  TempDir dir("kneesight_table");
  auto path = dir.path / "cycles.csv";

  SUBCASE("empty list -> header-only file -> empty list") {
    write_cycle_table(path, {});
    CHECK(read_cycle_table(path).empty());
  }

  SUBCASE("251 rows round trip bit-exactly with NaN as empty field") {
    std::vector<CycleRow> rows;
    for (int i = 0; i < 251; ++i) {
      CycleRow r;
      r.cell_id = "cell_" + std::to_string(i % 7);
      r.cycle_index = i;
      r.q_ah = 0.275 * (1.0 - 0.001 * i) + 1e-9 / (i + 1);
      r.soh = r.q_ah / 0.275;
      r.e_wh = r.q_ah * 3.7;
      r.dv_ir = 0.031 + 1e-5 * i;
      r.eod_slope = -1.1;
      r.plateau_ah = i == 17 ? std::nan("") : 0.05;  // one missing descriptor
      r.mid_curvature = -0.2;
      r.mean_current_a = -1.0;
      r.mean_temp_c = std::nan("");
      r.dataset_tag = "fixture";
      rows.push_back(r);
    }
    write_cycle_table(path, rows);
    auto back = read_cycle_table(path);
    REQUIRE(back.size() == rows.size());
    auto same = [](double a, double b) {
      return std::memcmp(&a, &b, sizeof a) == 0 || (std::isnan(a) && std::isnan(b));
    };
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(back[i].cell_id == rows[i].cell_id);
      CHECK(back[i].cycle_index == rows[i].cycle_index);
      CHECK(same(back[i].q_ah, rows[i].q_ah));
      CHECK(same(back[i].soh, rows[i].soh));
      CHECK(same(back[i].e_wh, rows[i].e_wh));
      CHECK(same(back[i].dv_ir, rows[i].dv_ir));
      CHECK(same(back[i].eod_slope, rows[i].eod_slope));
      CHECK(same(back[i].plateau_ah, rows[i].plateau_ah));
      CHECK(same(back[i].mid_curvature, rows[i].mid_curvature));
      CHECK(same(back[i].mean_current_a, rows[i].mean_current_a));
      CHECK(same(back[i].mean_temp_c, rows[i].mean_temp_c));
      CHECK(back[i].dataset_tag == rows[i].dataset_tag);
    }
    CHECK(std::isnan(back[17].plateau_ah));
  }

  SUBCASE("schema mismatch names the offending column") {
    csv::write_text(path, "cell_id,bogus\nA,1\n");
    CHECK_THROWS_WITH_AS(read_cycle_table(path), "unknown column: bogus", std::invalid_argument);
    std::string header = "cell_id,cycle_index,q_ah,soh,e_wh,dv_ir,eod_slope,plateau_ah,"
                         "mid_curvature,mean_current_a,mean_temp_c";  // dataset_tag missing
    csv::write_text(path, header + "\n");
    CHECK_THROWS_WITH_AS(read_cycle_table(path), "missing column: dataset_tag",
                         std::invalid_argument);
  }
}

TEST_CASE("load_mapping parses JSON with defaults and rejects bad sign") {
  TempDir dir("kneesight_mapping");
  csv::write_text(dir.path / "map.json",
                  R"({"cell_id_col":"c","time_col":"t","current_col":"i","voltage_col":"v",)"
                  R"("temperature_col":null,"current_scale":0.001,"discharge_sign":"positive"})");
  auto m = load_mapping(dir.path / "map.json");
  CHECK(m.cell_id_col == "c");
  CHECK(!m.temperature_col.has_value());
  CHECK(m.current_scale == 0.001);
  CHECK(m.time_scale == 1.0);
  CHECK(!m.discharge_negative);

  csv::write_text(dir.path / "bad.json",
                  R"({"cell_id_col":"c","time_col":"t","current_col":"i","voltage_col":"v",)"
                  R"("discharge_sign":"sideways"})");
  CHECK_THROWS_AS(load_mapping(dir.path / "bad.json"), std::invalid_argument);
  csv::write_text(dir.path / "missing.json", R"({"cell_id_col":"c"})");
  CHECK_THROWS_AS(load_mapping(dir.path / "missing.json"), std::invalid_argument);
}
