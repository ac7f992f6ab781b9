#pragma once

// Raw time-series loading, charge/discharge segmentation, and the pinned
// per-cycle CSV schema that every later stage consumes.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kneesight {

struct RawSample {
  double t_s = 0;        // seconds
  double current_a = 0;  // signed amperes; discharge negative internally
  double voltage_v = 0;  // volts
  double temp_c = 0;     // degrees Celsius; NaN when the channel is absent
};

struct RawTimeSeries {
  std::string cell_id;
  std::string dataset_tag;
  std::vector<RawSample> samples;  // strictly increasing t_s
};

enum class CycleKind { charge, discharge };

struct Cycle {
  std::string cell_id;
  int cycle_index = 0;  // unique per (cell_id, kind), 0-based in time order
  CycleKind kind = CycleKind::discharge;
  std::vector<RawSample> samples;
  std::string dataset_tag;
};

struct SegmentationConfig {
  double current_threshold_a = 0.01;  // |I| at or below this is rest
  int min_segment_samples = 10;
  bool discharge_negative = true;  // sign convention of the input currents
};

// Column mapping for heterogeneous input tables. JSON keys: cell_id_col,
// time_col, current_col, voltage_col, temperature_col (nullable),
// current_scale, voltage_scale, time_scale, discharge_sign
// ("negative"|"positive"), plus an optional constant dataset_tag label.
struct ChannelMapping {
  std::string cell_id_col;
  std::string time_col;
  std::string current_col;
  std::string voltage_col;
  std::optional<std::string> temperature_col;
  double current_scale = 1.0;
  double voltage_scale = 1.0;
  double time_scale = 1.0;
  bool discharge_negative = true;  // false flips currents on load
  std::string dataset_tag = "default";
};

ChannelMapping load_mapping(const std::filesystem::path& json_path);

// One series per distinct cell id (in first-appearance order), samples
// time-sorted, units converted to SI via the mapping scales. Duplicate
// timestamps within a cell and unparseable numeric cells are hard errors
// reported with their source row index.
std::vector<RawTimeSeries> load_timeseries(const std::filesystem::path& csv_path,
                                           const ChannelMapping& mapping);

// Maximal runs of same-sign current with |I| > threshold and length >=
// min_segment_samples become cycles; rest samples separate runs. Discharge
// and charge cycles are numbered independently, 0,1,2,... in time order.
std::vector<Cycle> segment_cycles(const RawTimeSeries& series, const SegmentationConfig& cfg);

// One row of the harmonised per-cycle table. Missing descriptors are NaN.
struct CycleRow {
  std::string cell_id;
  int cycle_index = 0;
  double q_ah = 0;           // delivered capacity Q_k
  double soh = 0;            // Q_k / Q0
  double e_wh = 0;           // energy throughput E_k
  double dv_ir = 0;          // initial ohmic voltage drop
  double eod_slope = 0;      // end-of-discharge dV/dQ
  double plateau_ah = 0;     // flat-voltage capacity span
  double mid_curvature = 0;  // mean d2V/dQ2 over the mid-capacity window
  double mean_current_a = 0;
  double mean_temp_c = 0;
  std::string dataset_tag;
};

// Fixed column order of the per-cycle table.
extern const std::vector<std::string> kCycleTableColumns;

// Round-trip-exact table IO (atomic write; read rejects schema mismatches
// naming the offending column).
void write_cycle_table(const std::filesystem::path& path, std::span<const CycleRow> rows);
std::vector<CycleRow> read_cycle_table(const std::filesystem::path& path);

}  // namespace kneesight
