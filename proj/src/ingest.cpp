#include "kneesight/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "kneesight/csv.hpp"
#include "kneesight/log.hpp"

namespace kneesight {

const std::vector<std::string> kCycleTableColumns = {
    "cell_id",     "cycle_index", "q_ah",          "soh",
    "e_wh",        "dv_ir",       "eod_slope",     "plateau_ah",
    "mid_curvature", "mean_current_a", "mean_temp_c", "dataset_tag"};

ChannelMapping load_mapping(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::invalid_argument("cannot open mapping: " + json_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("mapping is not valid JSON: " + std::string(e.what()));
  }
  ChannelMapping m;
  for (const char* key : {"cell_id_col", "time_col", "current_col", "voltage_col"})
    if (!j.contains(key))
      throw std::invalid_argument(std::string("mapping missing key: ") + key);
  m.cell_id_col = j["cell_id_col"].get<std::string>();
  m.time_col = j["time_col"].get<std::string>();
  m.current_col = j["current_col"].get<std::string>();
  m.voltage_col = j["voltage_col"].get<std::string>();
  if (j.contains("temperature_col") && !j["temperature_col"].is_null())
    m.temperature_col = j["temperature_col"].get<std::string>();
  m.current_scale = j.value("current_scale", 1.0);
  m.voltage_scale = j.value("voltage_scale", 1.0);
  m.time_scale = j.value("time_scale", 1.0);
  std::string sign = j.value("discharge_sign", "negative");
  if (sign != "negative" && sign != "positive")
    throw std::invalid_argument("discharge_sign must be 'negative' or 'positive'");
  m.discharge_negative = (sign == "negative");
  m.dataset_tag = j.value("dataset_tag", "default");
  return m;
}

std::vector<RawTimeSeries> load_timeseries(const std::filesystem::path& csv_path,
                                           const ChannelMapping& mapping) {
  csv::Table table = csv::read(csv_path);
  std::size_t id_col = table.col(mapping.cell_id_col);
  std::size_t t_col = table.col(mapping.time_col);
  std::size_t i_col = table.col(mapping.current_col);
  std::size_t v_col = table.col(mapping.voltage_col);
  std::optional<std::size_t> temp_col;
  if (mapping.temperature_col) temp_col = table.col(*mapping.temperature_col);

  struct IndexedSample {
    RawSample s;
    std::size_t source_row;
  };
  std::vector<std::string> cell_order;
  std::map<std::string, std::vector<IndexedSample>> by_cell;

  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    RawSample s;
    try {
      s.t_s = csv::parse_double(row[t_col]) * mapping.time_scale;
      s.current_a = csv::parse_double(row[i_col]) * mapping.current_scale;
      s.voltage_v = csv::parse_double(row[v_col]) * mapping.voltage_scale;
      s.temp_c = temp_col ? csv::parse_double(row[*temp_col]) : std::nan("");
    } catch (const std::invalid_argument& e) {
      std::ostringstream msg;
      msg << csv_path.string() << " row " << (r + 1) << ": " << e.what();
      throw std::invalid_argument(msg.str());
    }
    if (!mapping.discharge_negative) s.current_a = -s.current_a;
    if (!(s.voltage_v > 0)) {
      std::ostringstream msg;
      msg << csv_path.string() << " row " << (r + 1) << ": voltage must be > 0";
      throw std::invalid_argument(msg.str());
    }
    const std::string& id = row[id_col];
    auto [it, inserted] = by_cell.try_emplace(id);
    if (inserted) cell_order.push_back(id);
    it->second.push_back({s, r + 1});
  }

  std::vector<RawTimeSeries> out;
  out.reserve(cell_order.size());
  for (const auto& id : cell_order) {
    auto& samples = by_cell[id];
    std::stable_sort(samples.begin(), samples.end(),
                     [](const IndexedSample& a, const IndexedSample& b) { return a.s.t_s < b.s.t_s; });
    for (std::size_t i = 1; i < samples.size(); ++i) {
      if (samples[i].s.t_s == samples[i - 1].s.t_s) {
        std::ostringstream msg;
        msg << "duplicate timestamp for cell '" << id << "' at source row "
            << samples[i].source_row;
        throw std::invalid_argument(msg.str());
      }
    }
    RawTimeSeries series;
    series.cell_id = id;
    series.dataset_tag = mapping.dataset_tag;
    series.samples.reserve(samples.size());
    for (const auto& is : samples) series.samples.push_back(is.s);
    out.push_back(std::move(series));
  }
  return out;
}

std::vector<Cycle> segment_cycles(const RawTimeSeries& series, const SegmentationConfig& cfg) {
  if (series.samples.empty()) throw std::invalid_argument("cannot segment an empty series");
  if (!(cfg.current_threshold_a > 0))
    throw std::invalid_argument("current_threshold_a must be > 0");
  if (cfg.min_segment_samples < 2)
    throw std::invalid_argument("min_segment_samples must be >= 2");

  // -1 rest, 0 negative current, 1 positive current
  auto classify = [&](const RawSample& s) {
    if (std::abs(s.current_a) <= cfg.current_threshold_a) return -1;
    return s.current_a > 0 ? 1 : 0;
  };

  std::vector<Cycle> cycles;
  int discharge_count = 0, charge_count = 0;
  std::size_t n = series.samples.size();
  std::size_t run_start = 0;
  int run_class = classify(series.samples[0]);
  auto flush = [&](std::size_t end) {  // [run_start, end)
    if (run_class == -1) return;
    if (end - run_start < static_cast<std::size_t>(cfg.min_segment_samples)) return;
    bool negative_run = (run_class == 0);
    bool is_discharge = cfg.discharge_negative ? negative_run : !negative_run;
    Cycle c;
    c.cell_id = series.cell_id;
    c.dataset_tag = series.dataset_tag;
    c.kind = is_discharge ? CycleKind::discharge : CycleKind::charge;
    c.cycle_index = is_discharge ? discharge_count++ : charge_count++;
    c.samples.assign(series.samples.begin() + static_cast<long>(run_start),
                     series.samples.begin() + static_cast<long>(end));
    cycles.push_back(std::move(c));
  };
  for (std::size_t i = 1; i < n; ++i) {
    int cls = classify(series.samples[i]);
    if (cls != run_class) {
      flush(i);
      run_start = i;
      run_class = cls;
    }
  }
  flush(n);
  return cycles;
}

namespace {

CycleRow row_from_fields(const std::vector<std::string>& f, const csv::Table& t) {
  CycleRow r;
  r.cell_id = f[t.col("cell_id")];
  r.cycle_index = static_cast<int>(csv::parse_double(f[t.col("cycle_index")]));
  r.q_ah = csv::parse_double(f[t.col("q_ah")]);
  r.soh = csv::parse_double(f[t.col("soh")]);
  r.e_wh = csv::parse_double(f[t.col("e_wh")]);
  r.dv_ir = csv::parse_double(f[t.col("dv_ir")]);
  r.eod_slope = csv::parse_double(f[t.col("eod_slope")]);
  r.plateau_ah = csv::parse_double(f[t.col("plateau_ah")]);
  r.mid_curvature = csv::parse_double(f[t.col("mid_curvature")]);
  r.mean_current_a = csv::parse_double(f[t.col("mean_current_a")]);
  r.mean_temp_c = csv::parse_double(f[t.col("mean_temp_c")]);
  r.dataset_tag = f[t.col("dataset_tag")];
  return r;
}

}  // namespace

void write_cycle_table(const std::filesystem::path& path, std::span<const CycleRow> rows) {
  csv::Table t;
  t.columns = kCycleTableColumns;
  t.rows.reserve(rows.size());
  for (const auto& r : rows) {
    t.rows.push_back({r.cell_id, std::to_string(r.cycle_index), csv::format_double(r.q_ah),
                      csv::format_double(r.soh), csv::format_double(r.e_wh),
                      csv::format_double(r.dv_ir), csv::format_double(r.eod_slope),
                      csv::format_double(r.plateau_ah), csv::format_double(r.mid_curvature),
                      csv::format_double(r.mean_current_a), csv::format_double(r.mean_temp_c),
                      r.dataset_tag});
  }
  csv::write(path, t);
}

std::vector<CycleRow> read_cycle_table(const std::filesystem::path& path) {
  csv::Table t = csv::read(path);
  // Exact schema check: reject unknown and missing columns by name.
  for (const auto& c : t.columns)
    if (std::find(kCycleTableColumns.begin(), kCycleTableColumns.end(), c) ==
        kCycleTableColumns.end())
      throw std::invalid_argument("unknown column: " + c);
  for (const auto& c : kCycleTableColumns) t.col(c);  // throws "missing column: <name>"
  std::vector<CycleRow> rows;
  rows.reserve(t.rows.size());
  for (const auto& f : t.rows) rows.push_back(row_from_fields(f, t));
  return rows;
}

}  // namespace kneesight
