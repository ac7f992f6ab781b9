#include "kneesight/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "kneesight/common.hpp"
#include "kneesight/csv.hpp"
#include "kneesight/features.hpp"
#include "kneesight/ingest.hpp"
#include "kneesight/inr.hpp"
#include "kneesight/knee.hpp"
#include "kneesight/log.hpp"
#include "kneesight/predict.hpp"
#include "kneesight/reliability.hpp"
#include "kneesight/rng.hpp"
#include "kneesight/stats.hpp"
#include "kneesight/synth.hpp"

namespace kneesight::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config plumbing. Every flag has a config-file equivalent; explicitly passed
// flags win over file values, file values win over built-in defaults.
// ---------------------------------------------------------------------------

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("invalid JSON in " + path + ": " + e.what());
  }
  if (!j.is_object())
    throw std::invalid_argument("config root must be a JSON object: " + path);
  return j;
}

json section(const json& cfg, const char* key) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return json::object();
  if (!it->is_object())
    throw std::invalid_argument(std::string("config key '") + key + "' must be an object");
  return *it;
}

template <typename T>
void cfg_get(const json& cfg, const char* key, T& value) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return;
  try {
    value = it->get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config key '") + key + "' has the wrong type");
  }
}

void cfg_get_opt(const json& cfg, const char* key, std::optional<double>& value) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return;
  if (it->is_null()) {
    value.reset();
    return;
  }
  if (!it->is_number())
    throw std::invalid_argument(std::string("config key '") + key + "' must be a number or null");
  value = it->get<double>();
}

Range range_from_json(const json& cfg, const char* key, Range def) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return def;
  if (it->is_number()) {
    double v = it->get<double>();
    return {v, v};
  }
  if (it->is_array() && it->size() == 2 && (*it)[0].is_number() && (*it)[1].is_number())
    return {(*it)[0].get<double>(), (*it)[1].get<double>()};
  throw std::invalid_argument(std::string("config key '") + key +
                              "' must be a number or a [lo, hi] array");
}

InrConfig inr_from_json(const json& j, InrConfig base) {
  if (j.contains("variant"))
    base.variant = inr_variant_from_string(j.at("variant").get<std::string>());
  cfg_get(j, "input_dim", base.input_dim);
  cfg_get(j, "output_dim", base.output_dim);
  cfg_get(j, "hidden_layers", base.hidden_layers);
  cfg_get(j, "hidden_width", base.hidden_width);
  cfg_get(j, "omega0", base.omega0);
  cfg_get(j, "posenc_frequencies", base.posenc_frequencies);
  cfg_get(j, "fourier_features", base.fourier_features);
  cfg_get(j, "fourier_scale", base.fourier_scale);
  cfg_get(j, "rbf_centers", base.rbf_centers);
  cfg_get(j, "dropout_p", base.dropout_p);
  cfg_get(j, "epochs", base.epochs);
  cfg_get(j, "learning_rate", base.learning_rate);
  cfg_get(j, "seed", base.seed);
  return base;
}

KneeConfig knee_from_json(const json& j, KneeConfig base) {
  if (j.contains("smoother"))
    base.smoother = smoother_from_string(j.at("smoother").get<std::string>());
  cfg_get(j, "window", base.window);
  cfg_get_opt(j, "tau", base.tau);
  cfg_get(j, "min_prefix", base.min_prefix);
  cfg_get(j, "raw_second_derivative", base.raw_second_derivative);
  base.inr = inr_from_json(section(j, "inr"), base.inr);
  return base;
}

ForestConfig forest_from_json(const json& j, ForestConfig base) {
  cfg_get(j, "n_trees", base.n_trees);
  cfg_get(j, "max_depth", base.max_depth);
  cfg_get(j, "min_samples_split", base.min_samples_split);
  cfg_get(j, "features_per_split", base.features_per_split);
  cfg_get(j, "bootstrap", base.bootstrap);
  cfg_get(j, "seed", base.seed);
  return base;
}

ModelSpec::Kind model_kind_from_string(const std::string& name) {
  if (name == "linear") return ModelSpec::Kind::baseline_linear;
  if (name == "polynomial") return ModelSpec::Kind::baseline_polynomial;
  if (name == "forest") return ModelSpec::Kind::forest;
  if (name == "inr") return ModelSpec::Kind::inr;
  throw std::invalid_argument("unknown model kind '" + name +
                              "' (expected linear|polynomial|forest|inr)");
}

std::string model_kind_name(ModelSpec::Kind k) {
  switch (k) {
    case ModelSpec::Kind::baseline_linear: return "linear";
    case ModelSpec::Kind::baseline_polynomial: return "polynomial";
    case ModelSpec::Kind::forest: return "forest";
    case ModelSpec::Kind::inr: return "inr";
  }
  return "forest";
}

ModelSpec model_from_json(const json& j, std::uint64_t seed, int jobs) {
  ModelSpec spec;
  spec.forest.seed = seed;
  spec.inr.seed = seed;
  spec.jobs = jobs;
  if (j.contains("kind")) spec.kind = model_kind_from_string(j.at("kind").get<std::string>());
  cfg_get(j, "poly_degree", spec.poly_degree);
  spec.forest = forest_from_json(section(j, "forest"), spec.forest);
  spec.inr = inr_from_json(section(j, "inr"), spec.inr);
  cfg_get(j, "val_fraction", spec.inr_val_fraction);
  return spec;
}

// ---------------------------------------------------------------------------
// Shared per-subcommand context (global flags merged with the config file).
// ---------------------------------------------------------------------------

struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "out";
  int jobs = 0;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "JSON config file; flags override file values");
  sub->add_option("--seed", f.seed, "seed for every stochastic step");
  sub->add_option("--out", f.out, "output directory (default: out)");
  sub->add_option("--jobs", f.jobs, "worker threads for per-cell stages; <= 0 uses all cores");
}

struct Ctx {
  const CLI::App* sub = nullptr;
  json cfg;
  std::uint64_t seed = 0;
  fs::path out;
  int jobs = 0;

  bool given(const std::string& flag) const { return sub->count(flag) > 0; }
};

Ctx make_ctx(const CLI::App* sub, CommonFlags& f) {
  Ctx c;
  c.sub = sub;
  c.cfg = load_config(f.config);
  if (!sub->count("--seed")) cfg_get(c.cfg, "seed", f.seed);
  if (!sub->count("--out")) cfg_get(c.cfg, "out", f.out);
  if (!sub->count("--jobs")) cfg_get(c.cfg, "jobs", f.jobs);
  c.seed = f.seed;
  c.out = f.out;
  c.jobs = f.jobs;
  return c;
}

// Resolves an input artifact path: explicit flag value, else config key, else
// the canonical file inside the output directory (so chained subcommands with
// a shared --out just work).
fs::path artifact(const Ctx& c, const std::string& flag_value, const char* cfg_key,
                  const char* filename, const char* producer) {
  fs::path p;
  if (!flag_value.empty()) {
    p = flag_value;
  } else {
    std::string from_cfg;
    cfg_get(c.cfg, cfg_key, from_cfg);
    p = from_cfg.empty() ? c.out / filename : fs::path(from_cfg);
  }
  if (!fs::exists(p))
    throw std::invalid_argument("missing upstream artifact: " + p.string() + " (run `kneesight " +
                                producer + "` first)");
  return p;
}

std::string fmt(double v) { return csv::format_double(v); }

std::string opt_int(const std::optional<int>& v) {
  return v ? std::to_string(*v) : std::string();
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double pop_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char ch : name)
    out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return out.empty() ? std::string("unnamed") : out;
}

// ---------------------------------------------------------------------------
// Cell assembly: per-cycle table rows -> trajectories + row blocks.
// ---------------------------------------------------------------------------

std::vector<CellRecord> assemble_cells(const std::vector<CycleRow>& rows, double eol_threshold) {
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<CycleRow>> grouped;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    auto [it, inserted] = index.try_emplace(r.cell_id, grouped.size());
    if (inserted) {
      grouped.emplace_back();
      order.push_back(r.cell_id);
    }
    grouped[it->second].push_back(r);
  }

  std::vector<CellRecord> cells;
  cells.reserve(grouped.size());
  int skipped = 0;
  for (std::size_t g = 0; g < grouped.size(); ++g) {
    auto& cell_rows = grouped[g];
    std::stable_sort(cell_rows.begin(), cell_rows.end(),
                     [](const CycleRow& a, const CycleRow& b) { return a.cycle_index < b.cycle_index; });
    for (std::size_t i = 1; i < cell_rows.size(); ++i)
      if (cell_rows[i].cycle_index == cell_rows[i - 1].cycle_index)
        throw std::invalid_argument("duplicate cycle_index " +
                                    std::to_string(cell_rows[i].cycle_index) + " for cell " +
                                    order[g]);
    CapacityTrajectory traj;
    traj.cell_id = order[g];
    traj.dataset_tag = cell_rows.front().dataset_tag;
    for (const auto& r : cell_rows)
      if (std::isfinite(r.soh)) traj.points.push_back({r.cycle_index, r.soh});
    for (const auto& r : cell_rows) {
      if (std::isfinite(r.q_ah) && std::isfinite(r.soh) && r.soh > 0) {
        traj.q0 = r.q_ah / r.soh;
        break;
      }
    }
    if (traj.points.empty()) {
      log_warn("cell " + order[g] + " has no finite soh values; skipping");
      ++skipped;
      continue;
    }
    traj.eol_cycle = detect_eol(traj, eol_threshold);
    CellRecord rec;
    rec.trajectory = std::move(traj);
    rec.rows = std::move(cell_rows);
    cells.push_back(std::move(rec));
  }
  if (skipped > 0) log_info(std::to_string(skipped) + " cells skipped during assembly");
  if (cells.empty()) throw std::invalid_argument("no usable cells in the per-cycle table");
  return cells;
}

std::vector<CellRecord> read_cells(const fs::path& cycles_path, double eol_threshold) {
  return assemble_cells(read_cycle_table(cycles_path), eol_threshold);
}

double eol_threshold_of(const Ctx& c) {
  double thr = 0.80;
  cfg_get(c.cfg, "eol_threshold", thr);
  if (!(thr > 0) || !(thr < 1))
    throw std::invalid_argument("eol_threshold must lie in (0, 1)");
  return thr;
}

csv::Table histogram_table(std::vector<double> values, int bins) {
  csv::Table t;
  t.columns = {"x", "y"};
  if (values.empty()) return t;
  auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  double mn = *mn_it, mx = *mx_it;
  if (!(mx > mn)) {
    t.rows.push_back({fmt(mn), std::to_string(values.size())});
    return t;
  }
  double width = (mx - mn) / bins;
  std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto idx = static_cast<std::size_t>((v - mn) / width);
    if (idx >= counts.size()) idx = counts.size() - 1;
    ++counts[idx];
  }
  for (std::size_t b = 0; b < counts.size(); ++b)
    t.rows.push_back({fmt(mn + (static_cast<double>(b) + 0.5) * width), std::to_string(counts[b])});
  return t;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(Ctx& c, int n_cells, const std::string& tag) {
  PopulationSpec spec;
  spec.seed = c.seed;
  spec.n_cells = n_cells;
  if (!c.given("--n-cells")) cfg_get(c.cfg, "n_cells", spec.n_cells);
  spec.dataset_tag = tag;
  if (!c.given("--tag")) cfg_get(c.cfg, "dataset_tag", spec.dataset_tag);
  spec.q0 = range_from_json(c.cfg, "q0", spec.q0);
  spec.linear_rate = range_from_json(c.cfg, "linear_rate", spec.linear_rate);
  spec.accel = range_from_json(c.cfg, "accel", spec.accel);
  spec.knee_cycle = range_from_json(c.cfg, "knee_cycle", spec.knee_cycle);
  spec.noise_sd = range_from_json(c.cfg, "noise_sd", spec.noise_sd);
  spec.length = range_from_json(c.cfg, "length", spec.length);
  cfg_get(c.cfg, "knee_prob", spec.knee_prob);
  cfg_get(c.cfg, "post_knee_exponent", spec.post_knee_exponent);
  cfg_get(c.cfg, "rate_shift", spec.rate_shift);
  cfg_get(c.cfg, "accel_shift", spec.accel_shift);
  cfg_get(c.cfg, "noise_shift", spec.noise_shift);

  auto cells = gen_population(spec);
  std::vector<CycleRow> rows;
  for (const auto& cell : cells) rows.insert(rows.end(), cell.rows.begin(), cell.rows.end());
  fs::path cycles_path = c.out / "cycles.csv";
  write_cycle_table(cycles_path, rows);

  csv::Table truth;
  truth.columns = {"cell_id", "true_knee", "true_eol", "q0", "linear_rate",
                   "accel",   "noise_sd",  "length"};
  for (const auto& cell : cells)
    truth.rows.push_back({cell.trajectory.cell_id, opt_int(cell.true_knee), opt_int(cell.true_eol),
                          fmt(cell.spec.q0), fmt(cell.spec.linear_rate), fmt(cell.spec.accel),
                          fmt(cell.spec.noise_sd), std::to_string(cell.spec.length)});
  csv::write(c.out / "truth.csv", truth);

  std::cout << "synth: " << cells.size() << " cells, " << rows.size() << " cycle rows -> "
            << cycles_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

int cmd_ingest(Ctx& c, std::string raw, std::string mapping) {
  if (raw.empty()) cfg_get(c.cfg, "raw", raw);
  if (mapping.empty()) cfg_get(c.cfg, "mapping", mapping);
  if (raw.empty() || mapping.empty())
    throw std::invalid_argument("ingest needs --raw <csv> and --mapping <json>");

  SegmentationConfig seg;
  json seg_cfg = section(c.cfg, "segmentation");
  cfg_get(seg_cfg, "current_threshold_a", seg.current_threshold_a);
  cfg_get(seg_cfg, "min_segment_samples", seg.min_segment_samples);

  DescriptorConfig desc;
  json desc_cfg = section(c.cfg, "descriptors");
  cfg_get(desc_cfg, "ir_window_s", desc.ir_window_s);
  cfg_get(desc_cfg, "eod_fraction", desc.eod_fraction);
  cfg_get(desc_cfg, "plateau_band_v_per_ah", desc.plateau_band_v_per_ah);
  cfg_get(desc_cfg, "mid_fraction_lo", desc.mid_fraction_lo);
  cfg_get(desc_cfg, "mid_fraction_hi", desc.mid_fraction_hi);
  cfg_get(desc_cfg, "min_samples", desc.min_samples);

  auto channel_map = load_mapping(mapping);
  auto series_list = load_timeseries(raw, channel_map);
  std::vector<CycleRow> all_rows;
  int kept_cells = 0;
  for (const auto& series : series_list) {
    auto cycles = segment_cycles(series, seg);
    std::vector<CycleRow> rows;
    for (const auto& cyc : cycles)
      if (cyc.kind == CycleKind::discharge) rows.push_back(featurize_cycle(cyc, desc));
    if (rows.empty()) {
      log_warn("cell " + series.cell_id + ": no discharge cycles after segmentation");
      continue;
    }
    CapacityTrajectory traj;
    try {
      traj = build_trajectory(rows);
    } catch (const std::invalid_argument& e) {
      log_warn("cell " + series.cell_id + ": " + e.what());
      continue;
    }
    if (!(traj.q0 > 0)) {
      log_warn("cell " + series.cell_id + ": could not establish Q0");
      continue;
    }
    for (auto& r : rows) r.soh = r.q_ah / traj.q0;
    all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    ++kept_cells;
  }
  if (all_rows.empty())
    throw std::invalid_argument("no usable cells found in " + raw);
  fs::path cycles_path = c.out / "cycles.csv";
  write_cycle_table(cycles_path, all_rows);
  std::cout << "ingest: " << kept_cells << "/" << series_list.size() << " cells, "
            << all_rows.size() << " cycle rows -> " << cycles_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// features
// ---------------------------------------------------------------------------

int cmd_features(Ctx& c, const std::string& cycles_flag) {
  fs::path cycles_path = artifact(c, cycles_flag, "cycles", "cycles.csv", "synth` or `kneesight ingest");
  auto cells = read_cells(cycles_path, eol_threshold_of(c));
  csv::Table t;
  t.columns = {"cell_id", "n_cycles", "q0", "eol_cycle", "dataset_tag"};
  int with_eol = 0;
  for (const auto& cell : cells) {
    const auto& traj = cell.trajectory;
    if (traj.eol_cycle) ++with_eol;
    t.rows.push_back({traj.cell_id, std::to_string(traj.points.size()), fmt(traj.q0),
                      opt_int(traj.eol_cycle), traj.dataset_tag});
  }
  fs::path out_path = c.out / "trajectories.csv";
  csv::write(out_path, t);
  std::cout << "features: " << cells.size() << " trajectories (" << with_eol
            << " reached end of life) -> " << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// knee
// ---------------------------------------------------------------------------

struct KneeFlags {
  std::string cycles;
  std::string smoother;
  int window = 5;
  double tau = 0;
  int min_prefix = 3;
  int n_early = 0;
  std::string variant;
};

int cmd_knee(Ctx& c, const KneeFlags& f) {
  fs::path cycles_path = artifact(c, f.cycles, "cycles", "cycles.csv", "synth` or `kneesight ingest");
  auto cells = read_cells(cycles_path, eol_threshold_of(c));

  KneeConfig kcfg;
  kcfg.inr.seed = c.seed;
  kcfg = knee_from_json(section(c.cfg, "knee"), kcfg);
  if (c.given("--smoother")) kcfg.smoother = smoother_from_string(f.smoother);
  if (c.given("--window")) kcfg.window = f.window;
  if (c.given("--tau")) kcfg.tau = f.tau;
  if (c.given("--min-prefix")) kcfg.min_prefix = f.min_prefix;
  if (c.given("--variant")) kcfg.inr.variant = inr_variant_from_string(f.variant);
  validate(kcfg);

  int n_early = f.n_early;
  if (!c.given("--n-early")) cfg_get(c.cfg, "n_early", n_early);
  InrConfig early_inr;
  early_inr.seed = c.seed;
  early_inr = inr_from_json(section(c.cfg, "early_inr"), early_inr);
  if (c.given("--variant")) early_inr.variant = inr_variant_from_string(f.variant);

  std::vector<std::optional<KneeReport>> reports(cells.size());
  parallel_for(cells.size(), c.jobs, [&](std::size_t i) {
    const auto& traj = cells[i].trajectory;
    if (n_early > 0) {
      if (static_cast<int>(traj.points.size()) < 4) return;
      CapacityTrajectory prefix = traj;
      if (static_cast<int>(prefix.points.size()) > n_early) prefix.points.resize(n_early);
      reports[i] = early_life_knee(prefix, kcfg, early_inr);
    } else {
      if (traj.points.size() < 3) return;
      reports[i] = detect_knee(traj, kcfg);
    }
  });

  csv::Table t;
  t.columns = {"cell_id", "knee_cycle", "threshold", "smoother"};
  int flagged = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& rep = reports[i];
    std::string knee, threshold;
    std::string smoother = to_string(kcfg.smoother);
    if (rep) {
      if (rep->knee_cycle) {
        knee = std::to_string(*rep->knee_cycle);
        ++flagged;
      }
      threshold = fmt(rep->threshold_used);
      smoother = to_string(rep->smoother_used);
    }
    t.rows.push_back({cells[i].trajectory.cell_id, knee, threshold, smoother});
  }
  fs::path out_path = c.out / "knees.csv";
  csv::write(out_path, t);
  std::cout << "knee: " << flagged << "/" << cells.size() << " cells flagged"
            << (n_early > 0 ? " (early-life N=" + std::to_string(n_early) + ")" : "") << " -> "
            << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit-inr
// ---------------------------------------------------------------------------

int cmd_fit_inr(Ctx& c, const std::string& cycles_flag, std::string cell_id,
                const std::string& variant) {
  fs::path cycles_path = artifact(c, cycles_flag, "cycles", "cycles.csv", "synth` or `kneesight ingest");
  auto cells = read_cells(cycles_path, eol_threshold_of(c));
  if (cell_id.empty()) cfg_get(c.cfg, "cell", cell_id);

  const CellRecord* chosen = nullptr;
  if (cell_id.empty()) {
    chosen = &cells.front();
  } else {
    for (const auto& cell : cells)
      if (cell.trajectory.cell_id == cell_id) chosen = &cell;
    if (!chosen) throw std::invalid_argument("cell not found in per-cycle table: " + cell_id);
  }

  InrConfig icfg;
  icfg.seed = c.seed;
  icfg = inr_from_json(section(c.cfg, "inr"), icfg);
  if (c.given("--variant")) icfg.variant = inr_variant_from_string(variant);
  icfg.input_dim = 1;
  icfg.output_dim = 1;

  double val_fraction = 0.2;
  cfg_get(c.cfg, "val_fraction", val_fraction);
  int patience = 10;
  cfg_get(c.cfg, "patience", patience);

  std::vector<TrainingSample> samples;
  for (const auto& p : chosen->trajectory.points)
    samples.push_back({{static_cast<double>(p.cycle)}, {p.soh}});
  auto [train_set, val_set] = split_train_val(samples, val_fraction);

  InrModel model = init_model(icfg);
  TrainOptions opts;
  opts.early_stop_patience = val_set.empty() ? 0 : patience;
  TrainingReport rep = train(model, train_set, val_set, opts);

  fs::path model_path = c.out / "inr_model.json";
  save_model(model, model_path);

  csv::Table loss;
  loss.columns = {"epoch", "train_loss", "val_loss"};
  for (std::size_t e = 0; e < rep.train_loss.size(); ++e)
    loss.rows.push_back({std::to_string(e + 1), fmt(rep.train_loss[e]),
                         e < rep.val_loss.size() ? fmt(rep.val_loss[e]) : std::string()});
  csv::write(c.out / "inr_loss.csv", loss);

  double final_train = rep.train_loss.empty() ? 0.0 : rep.train_loss.back();
  std::cout << "fit-inr: cell " << chosen->trajectory.cell_id << " variant="
            << to_string(icfg.variant) << " epochs=" << rep.final_epoch << " train MSE "
            << fmt(final_train);
  if (!rep.val_loss.empty()) std::cout << " val MSE " << fmt(rep.val_loss.back());
  std::cout << " -> " << model_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// reliability
// ---------------------------------------------------------------------------

struct EolScope {
  std::string name;
  std::vector<double> eols;
};

std::vector<EolScope> eol_scopes(const csv::Table& trajectories) {
  std::size_t eol_col = trajectories.col("eol_cycle");
  std::size_t tag_col = trajectories.col("dataset_tag");
  EolScope all{"all", {}};
  std::map<std::string, std::vector<double>> by_tag;
  for (const auto& row : trajectories.rows) {
    if (row[eol_col].empty()) continue;
    double eol = csv::parse_double(row[eol_col]);
    if (!(eol > 0)) {
      log_warn("non-positive end of life ignored for lifetime analysis");
      continue;
    }
    all.eols.push_back(eol);
    by_tag[row[tag_col]].push_back(eol);
  }
  std::vector<EolScope> scopes{std::move(all)};
  for (auto& [tag, eols] : by_tag) scopes.push_back({tag, std::move(eols)});
  return scopes;
}

int cmd_reliability(Ctx& c, const std::string& traj_flag, const std::string& family_name) {
  fs::path traj_path = artifact(c, traj_flag, "trajectories", "trajectories.csv", "features");
  csv::Table trajectories = csv::read(traj_path);
  auto scopes = eol_scopes(trajectories);

  std::string family = family_name;
  if (!c.given("--family")) cfg_get(c.cfg, "family", family);
  LifetimeFamily plot_family;
  if (family == "weibull") {
    plot_family = LifetimeFamily::weibull;
  } else if (family == "lognormal") {
    plot_family = LifetimeFamily::lognormal;
  } else {
    throw std::invalid_argument("unknown family '" + family + "' (expected weibull|lognormal)");
  }

  csv::Table fits;
  fits.columns = {"dataset",   "n_cells",     "eol_mean",  "eol_std",     "weibull_c",
                  "weibull_loc", "weibull_scale", "lognorm_s", "lognorm_loc", "lognorm_scale"};
  csv::Table km;
  km.columns = {"dataset", "t", "survival"};
  csv::Table fit_curves;
  fit_curves.columns = {"dataset", "t", "survival"};

  int fitted_scopes = 0;
  std::string headline;
  for (const auto& scope : scopes) {
    LifetimeSample sample;
    for (double eol : scope.eols) sample.values.push_back({eol, false});
    if (sample.values.size() < 3) {
      log_warn("scope " + scope.name + ": fewer than 3 lifetimes; skipping fits");
      continue;
    }
    LifetimeFit weib, logn;
    try {
      weib = fit_lifetime(LifetimeFamily::weibull, sample);
      logn = fit_lifetime(LifetimeFamily::lognormal, sample);
    } catch (const std::invalid_argument& e) {
      log_warn("scope " + scope.name + ": " + e.what());
      continue;
    }
    PopulationSummary pop = population_summary(sample);
    fits.rows.push_back({scope.name, std::to_string(pop.n), fmt(pop.mean), fmt(pop.stddev),
                         fmt(weib.weibull_shape), "0", fmt(weib.weibull_scale), fmt(logn.lognorm_s),
                         "0", fmt(logn.lognorm_scale)});
    ++fitted_scopes;
    if (scope.name == "all")
      headline = " weibull k=" + fmt(weib.weibull_shape) + " lambda=" + fmt(weib.weibull_scale);

    auto curve = kaplan_meier(sample);
    for (const auto& step : curve.steps)
      km.rows.push_back({scope.name, fmt(step.t), fmt(step.survival)});

    const LifetimeFit& plot_fit = plot_family == LifetimeFamily::weibull ? weib : logn;
    double t_max = 1.2 * *std::max_element(scope.eols.begin(), scope.eols.end());
    for (int i = 0; i <= 100; ++i) {
      double t = t_max * static_cast<double>(i) / 100.0;
      fit_curves.rows.push_back({scope.name, fmt(t), fmt(survival(plot_fit, t))});
    }
  }
  if (fitted_scopes == 0)
    throw std::invalid_argument("no scope had enough lifetimes for a parametric fit");

  fs::path out_path = c.out / "reliability.csv";
  csv::write(out_path, fits);
  csv::write(c.out / "km.csv", km);
  csv::write(c.out / "survival_fit.csv", fit_curves);
  std::cout << "reliability: " << fitted_scopes << " scopes," << headline << " -> "
            << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

struct JoinedCell {
  std::string tag;
  double q0 = 0;
  std::optional<double> eol;
  std::optional<double> knee;
};

std::vector<JoinedCell> join_cells(const csv::Table& trajectories, const csv::Table& knees) {
  std::map<std::string, double> knee_by_cell;
  std::size_t k_cell = knees.col("cell_id");
  std::size_t k_knee = knees.col("knee_cycle");
  for (const auto& row : knees.rows)
    if (!row[k_knee].empty()) knee_by_cell[row[k_cell]] = csv::parse_double(row[k_knee]);

  std::size_t t_cell = trajectories.col("cell_id");
  std::size_t t_q0 = trajectories.col("q0");
  std::size_t t_eol = trajectories.col("eol_cycle");
  std::size_t t_tag = trajectories.col("dataset_tag");
  std::vector<JoinedCell> cells;
  for (const auto& row : trajectories.rows) {
    JoinedCell cell;
    cell.tag = row[t_tag];
    cell.q0 = csv::parse_double(row[t_q0]);
    if (!row[t_eol].empty()) cell.eol = csv::parse_double(row[t_eol]);
    if (auto it = knee_by_cell.find(row[t_cell]); it != knee_by_cell.end()) cell.knee = it->second;
    cells.push_back(cell);
  }
  return cells;
}

int cmd_stats(Ctx& c, const std::string& traj_flag, const std::string& knee_flag) {
  fs::path traj_path = artifact(c, traj_flag, "trajectories", "trajectories.csv", "features");
  fs::path knee_path = artifact(c, knee_flag, "knees", "knees.csv", "knee");
  auto cells = join_cells(csv::read(traj_path), csv::read(knee_path));

  int bootstrap_b = 2000;
  cfg_get(c.cfg, "bootstrap_b", bootstrap_b);
  double level = 0.95;
  cfg_get(c.cfg, "level", level);

  std::vector<std::string> scopes{"all"};
  {
    std::set<std::string> tags;
    for (const auto& cell : cells) tags.insert(cell.tag);
    scopes.insert(scopes.end(), tags.begin(), tags.end());
  }

  csv::Table stats_table;
  stats_table.columns = {"dataset",        "n_cells",        "eol_mean",
                         "eol_std",        "knee_mean",      "knee_std",
                         "capacity0_mean", "capacity0_std",  "pearson_eol_knee",
                         "spearman_eol_knee", "pearson_eol_capacity0", "spearman_eol_capacity0"};
  csv::Table corr_table;
  corr_table.columns = {"dataset",  "pair",        "pearson",        "pearson_ci_low",
                        "pearson_ci_high", "spearman", "spearman_ci_low", "spearman_ci_high",
                        "n"};

  std::string headline;
  int corr_rows = 0;
  for (const auto& scope : scopes) {
    std::vector<double> eols, knees_v, q0s;
    std::vector<double> pair_eol_knee_x, pair_eol_knee_y;  // eol, knee
    std::vector<double> pair_eol_q0_x, pair_eol_q0_y;      // eol, q0
    std::size_t n_cells = 0;
    for (const auto& cell : cells) {
      if (scope != "all" && cell.tag != scope) continue;
      ++n_cells;
      q0s.push_back(cell.q0);
      if (cell.eol) eols.push_back(*cell.eol);
      if (cell.knee) knees_v.push_back(*cell.knee);
      if (cell.eol && cell.knee) {
        pair_eol_knee_x.push_back(*cell.eol);
        pair_eol_knee_y.push_back(*cell.knee);
      }
      if (cell.eol) {
        pair_eol_q0_x.push_back(*cell.eol);
        pair_eol_q0_y.push_back(cell.q0);
      }
    }
    if (n_cells == 0) continue;

    auto corr_or_empty = [](const std::vector<double>& x, const std::vector<double>& y,
                            CorrelationMethod m) -> std::string {
      if (x.size() < 3) return {};
      try {
        return fmt(correlation(x, y, m).estimate);
      } catch (const std::invalid_argument&) {
        return {};
      }
    };
    std::string p_ek = corr_or_empty(pair_eol_knee_x, pair_eol_knee_y, CorrelationMethod::pearson);
    stats_table.rows.push_back(
        {scope, std::to_string(n_cells),
         eols.empty() ? std::string() : fmt(mean_of(eols)),
         eols.size() < 2 ? std::string() : fmt(sample_std(eols)),
         knees_v.empty() ? std::string() : fmt(mean_of(knees_v)),
         knees_v.size() < 2 ? std::string() : fmt(sample_std(knees_v)),
         q0s.empty() ? std::string() : fmt(mean_of(q0s)),
         q0s.size() < 2 ? std::string() : fmt(sample_std(q0s)), p_ek,
         corr_or_empty(pair_eol_knee_x, pair_eol_knee_y, CorrelationMethod::spearman),
         corr_or_empty(pair_eol_q0_x, pair_eol_q0_y, CorrelationMethod::pearson),
         corr_or_empty(pair_eol_q0_x, pair_eol_q0_y, CorrelationMethod::spearman)});
    if (scope == "all" && !p_ek.empty()) headline = " pearson(EOL,knee)=" + p_ek + " [all]";

    auto corr_row = [&](const std::string& pair, const std::vector<double>& x,
                        const std::vector<double>& y) {
      if (x.size() < 3) return;
      std::vector<std::string> row{scope, pair};
      for (auto method : {CorrelationMethod::pearson, CorrelationMethod::spearman}) {
        std::string est, lo, hi;
        try {
          est = fmt(correlation(x, y, method).estimate);
          if (x.size() >= 10) {
            auto rep = bootstrap_ci(x, y, method, bootstrap_b, level,
                                    derive_seed(c.seed, corr_table.rows.size() * 2 +
                                                            (method == CorrelationMethod::pearson
                                                                 ? 0
                                                                 : 1)));
            if (rep.ci_low) lo = fmt(*rep.ci_low);
            if (rep.ci_high) hi = fmt(*rep.ci_high);
          }
        } catch (const std::invalid_argument&) {
          // degenerate side: leave fields empty
        } catch (const numeric_error& e) {
          log_warn("bootstrap for " + pair + " [" + scope + "]: " + e.what());
        }
        row.push_back(est);
        row.push_back(lo);
        row.push_back(hi);
      }
      row.push_back(std::to_string(x.size()));
      corr_table.rows.push_back(std::move(row));
      ++corr_rows;
    };
    corr_row("eol_vs_knee", pair_eol_knee_x, pair_eol_knee_y);
    corr_row("eol_vs_capacity0", pair_eol_q0_x, pair_eol_q0_y);
  }

  fs::path stats_path = c.out / "knee_stats.csv";
  csv::write(stats_path, stats_table);
  csv::write(c.out / "knee_correlations.csv", corr_table);

  // EOL group comparison across dataset tags, when there is more than one.
  std::map<std::string, std::vector<double>> eol_by_tag;
  for (const auto& cell : cells)
    if (cell.eol) eol_by_tag[cell.tag].push_back(*cell.eol);
  std::vector<std::vector<double>> groups;
  for (auto& [tag, eols] : eol_by_tag)
    if (eols.size() >= 2) groups.push_back(eols);
  if (groups.size() >= 2) {
    csv::Table tests;
    tests.columns = {"test", "statistic", "df1", "df2", "p_value"};
    auto f_rep = group_test(groups, GroupTest::anova_f);
    tests.rows.push_back({"anova_f", fmt(f_rep.statistic), fmt(f_rep.df[0]), fmt(f_rep.df[1]),
                          fmt(f_rep.p_value)});
    auto h_rep = group_test(groups, GroupTest::kruskal_wallis);
    tests.rows.push_back(
        {"kruskal_wallis", fmt(h_rep.statistic), fmt(h_rep.df[0]), "", fmt(h_rep.p_value)});
    csv::write(c.out / "eol_group_tests.csv", tests);
    if (groups.size() == 2) {
      auto eff = effect_sizes(groups[0], groups[1]);
      csv::Table effects;
      effects.columns = {"cohens_d", "cliffs_delta"};
      effects.rows.push_back(
          {eff.cohens_d ? fmt(*eff.cohens_d) : std::string(), fmt(eff.cliffs_delta)});
      csv::write(c.out / "eol_effect_sizes.csv", effects);
    }
  }

  std::cout << "stats: " << stats_table.rows.size() << " scopes, " << corr_rows
            << " correlation rows," << headline << " -> " << stats_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict / xeval shared plumbing
// ---------------------------------------------------------------------------

struct PredictFlags {
  std::string cycles;
  std::string mode = "early";
  int n_early = 10;
  std::string model;
  std::string target = "rul";
  int folds = 5;
};

DatasetConfig dataset_config(const Ctx& c, const PredictFlags& f) {
  DatasetConfig dcfg;
  std::string target = f.target;
  if (!c.given("--target")) cfg_get(c.cfg, "target", target);
  dcfg.target = target_kind_from_string(target);

  std::string mode = f.mode;
  if (!c.given("--mode")) cfg_get(c.cfg, "mode", mode);
  if (mode == "early") {
    dcfg.mode = LeakageClass::early_life;
  } else if (mode == "full") {
    dcfg.mode = LeakageClass::full_trajectory;
  } else {
    throw std::invalid_argument("unknown mode '" + mode + "' (expected early|full)");
  }

  dcfg.early_window = f.n_early;
  if (!c.given("--n-early")) cfg_get(c.cfg, "early_window", dcfg.early_window);

  dcfg.knee.inr.seed = c.seed;
  dcfg.knee = knee_from_json(section(c.cfg, "knee"), dcfg.knee);
  dcfg.early_knee_inr.seed = c.seed;
  dcfg.early_knee_inr = inr_from_json(section(c.cfg, "early_inr"), dcfg.early_knee_inr);
  return dcfg;
}

ModelSpec model_spec(const Ctx& c, const PredictFlags& f) {
  ModelSpec spec = model_from_json(section(c.cfg, "model"), c.seed, c.jobs);
  if (c.given("--model")) spec.kind = model_kind_from_string(f.model);
  return spec;
}

std::size_t count_cells(const SupervisedDataset& ds) {
  std::set<std::string> ids;
  for (const auto& row : ds.rows) ids.insert(row.cell_id);
  return ids.size();
}

int cmd_predict(Ctx& c, const PredictFlags& f) {
  fs::path cycles_path = artifact(c, f.cycles, "cycles", "cycles.csv", "synth` or `kneesight ingest");
  auto cells = read_cells(cycles_path, eol_threshold_of(c));
  DatasetConfig dcfg = dataset_config(c, f);
  ModelSpec spec = model_spec(c, f);
  int folds = f.folds;
  if (!c.given("--folds")) cfg_get(c.cfg, "folds", folds);

  SupervisedDataset ds = make_dataset(cells, dcfg);
  auto fold_of = cell_level_split(ds, folds, c.seed);

  bool with_sigma = spec.kind == ModelSpec::Kind::forest;
  struct PredRow {
    std::string cell_id;
    double cycle, target, pred, sigma;
    bool has_sigma;
  };
  std::vector<PredRow> pred_rows;
  std::vector<EvalReport> fold_reports;
  std::vector<double> all_preds, all_targets, all_sigmas, all_abs_err;
  for (int fold = 0; fold < folds; ++fold) {
    SupervisedDataset train = ds, test = ds;
    train.rows.clear();
    test.rows.clear();
    for (std::size_t i = 0; i < ds.rows.size(); ++i)
      (fold_of[i] == fold ? test : train).rows.push_back(ds.rows[i]);
    if (test.rows.empty() || train.rows.empty()) continue;

    std::vector<double> preds, targets;
    if (with_sigma) {
      ForestModel fm = fit_forest(train, spec.forest, spec.jobs);
      for (const auto& row : test.rows) {
        auto up = predict_with_variance(fm, row.features);
        preds.push_back(up.mean);
        pred_rows.push_back({row.cell_id, row.features[0], row.target, up.mean, up.sigma, true});
        all_sigmas.push_back(up.sigma);
        all_abs_err.push_back(std::abs(up.mean - row.target));
      }
    } else {
      auto predictor = fit_model(train, spec);
      for (const auto& row : test.rows) {
        double p = predictor(row.features);
        preds.push_back(p);
        pred_rows.push_back({row.cell_id, row.features[0], row.target, p, 0, false});
      }
    }
    for (const auto& row : test.rows) targets.push_back(row.target);
    fold_reports.push_back(evaluate(preds, targets));
    all_preds.insert(all_preds.end(), preds.begin(), preds.end());
    all_targets.insert(all_targets.end(), targets.begin(), targets.end());
  }

  EvalReport pooled = evaluate(all_preds, all_targets);
  std::vector<double> f_rmse, f_mae, f_mape, f_r2;
  for (const auto& rep : fold_reports) {
    f_rmse.push_back(rep.rmse);
    f_mae.push_back(rep.mae);
    f_mape.push_back(rep.mape);
    f_r2.push_back(rep.r2);
  }

  std::string mode_word = dcfg.mode == LeakageClass::early_life ? "early" : "full";
  std::string suffix = model_kind_name(spec.kind) + "_" + to_string(dcfg.target) + "_" +
                       mode_word + "_" + std::to_string(dcfg.early_window);

  csv::Table eval_t;
  eval_t.columns = {"model",     "target",    "mode",      "input_cycles", "n_folds",
                    "n_cells",   "n_rows",    "rmse_mean", "rmse_std",     "mae_mean",
                    "mae_std",   "mape_mean", "mape_std",  "r2_mean",      "r2_std",
                    "pooled_rmse", "pooled_mae", "pooled_mape", "pooled_r2"};
  eval_t.rows.push_back({model_kind_name(spec.kind), to_string(dcfg.target),
                         to_string(dcfg.mode), std::to_string(dcfg.early_window),
                         std::to_string(fold_reports.size()), std::to_string(count_cells(ds)),
                         std::to_string(ds.rows.size()), fmt(mean_of(f_rmse)), fmt(pop_std(f_rmse)),
                         fmt(mean_of(f_mae)), fmt(pop_std(f_mae)), fmt(mean_of(f_mape)),
                         fmt(pop_std(f_mape)), fmt(mean_of(f_r2)), fmt(pop_std(f_r2)),
                         fmt(pooled.rmse), fmt(pooled.mae), fmt(pooled.mape), fmt(pooled.r2)});
  fs::path eval_path = c.out / ("eval_" + suffix + ".csv");
  csv::write(eval_path, eval_t);

  csv::Table preds_t;
  preds_t.columns = {"cell_id", "cycle", "target", "prediction", "sigma"};
  for (const auto& row : pred_rows)
    preds_t.rows.push_back({row.cell_id, fmt(row.cycle), fmt(row.target), fmt(row.pred),
                            row.has_sigma ? fmt(row.sigma) : std::string()});
  csv::write(c.out / ("predictions_" + suffix + ".csv"), preds_t);

  auto full_predictor = fit_model(ds, spec);
  auto importances = permutation_importance(full_predictor, ds, c.seed);
  csv::Table imp_t;
  imp_t.columns = {"feature", "rmse_increase"};
  for (const auto& imp : importances) imp_t.rows.push_back({imp.feature, fmt(imp.rmse_increase)});
  csv::write(c.out / ("importance_" + suffix + ".csv"), imp_t);

  if (with_sigma && all_sigmas.size() >= 10) {
    auto cal = calibration_report(all_sigmas, all_abs_err);
    csv::Table bins_t;
    bins_t.columns = {"mean_sigma", "rmse", "count"};
    for (const auto& bin : cal.bins)
      bins_t.rows.push_back({fmt(bin.mean_sigma), fmt(bin.rmse), std::to_string(bin.count)});
    csv::write(c.out / ("calibration_" + suffix + ".csv"), bins_t);
    csv::Table curve_t;
    curve_t.columns = {"retained_fraction", "cumulative_rmse"};
    for (std::size_t i = 0; i < cal.retained_fraction.size(); ++i)
      curve_t.rows.push_back({fmt(cal.retained_fraction[i]), fmt(cal.cumulative_rmse[i])});
    csv::write(c.out / ("confidence_curve_" + suffix + ".csv"), curve_t);
  }

  std::cout << "predict: " << model_kind_name(spec.kind) << " " << to_string(dcfg.target) << " "
            << mode_word << " N=" << dcfg.early_window << " folds=" << fold_reports.size()
            << " rmse " << fmt(mean_of(f_rmse)) << "+/-" << fmt(pop_std(f_rmse)) << " r2 "
            << fmt(mean_of(f_r2)) << " -> " << eval_path.string() << "\n";
  return 0;
}

int cmd_xeval(Ctx& c, const PredictFlags& f) {
  fs::path cycles_path = artifact(c, f.cycles, "cycles", "cycles.csv", "synth` or `kneesight ingest");
  auto cells = read_cells(cycles_path, eol_threshold_of(c));
  DatasetConfig dcfg = dataset_config(c, f);
  ModelSpec spec = model_spec(c, f);

  std::map<std::string, std::vector<CellRecord>> by_tag;
  for (auto& cell : cells) by_tag[cell.trajectory.dataset_tag].push_back(cell);
  if (by_tag.size() < 2)
    throw std::invalid_argument("xeval needs at least two dataset tags in the per-cycle table");

  std::vector<SupervisedDataset> populations;
  for (auto& [tag, tag_cells] : by_tag) populations.push_back(make_dataset(tag_cells, dcfg));

  CrossDatasetMatrix matrix = cross_dataset_matrix(populations, spec);

  csv::Table t;
  t.columns = {"train_tag"};
  for (const auto& tag : matrix.tags) t.columns.push_back(tag);
  double diag = 0, off = 0;
  int n_off = 0;
  for (std::size_t i = 0; i < matrix.tags.size(); ++i) {
    std::vector<std::string> row{matrix.tags[i]};
    for (std::size_t j = 0; j < matrix.tags.size(); ++j) {
      row.push_back(fmt(matrix.rmse[i][j]));
      if (i == j) {
        diag += matrix.rmse[i][j];
      } else {
        off += matrix.rmse[i][j];
        ++n_off;
      }
    }
    t.rows.push_back(std::move(row));
  }
  diag /= static_cast<double>(matrix.tags.size());
  if (n_off > 0) off /= n_off;

  fs::path out_path = c.out / "xeval_matrix.csv";
  csv::write(out_path, t);
  std::cout << "xeval: " << matrix.tags.size() << "x" << matrix.tags.size()
            << " matrix, mean diag rmse " << fmt(diag) << ", mean off-diag " << fmt(off) << " -> "
            << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

int cmd_cluster(Ctx& c, const std::string& cycles_flag, int k, int components) {
  fs::path cycles_path = artifact(c, cycles_flag, "cycles", "cycles.csv", "synth` or `kneesight ingest");
  auto cells = read_cells(cycles_path, eol_threshold_of(c));
  if (!c.given("--k")) cfg_get(c.cfg, "k", k);
  if (!c.given("--components")) cfg_get(c.cfg, "components", components);
  int grid = 20;
  cfg_get(c.cfg, "grid_points", grid);
  if (grid < 4) throw std::invalid_argument("grid_points must be at least 4");

  // Resample each cell's soh curve on a common normalised cycle grid so
  // trajectories of different lengths become comparable shape vectors.
  std::vector<std::vector<double>> matrix;
  std::vector<const CapacityTrajectory*> used;
  for (const auto& cell : cells) {
    const auto& points = cell.trajectory.points;
    if (points.size() < 4) {
      log_warn("cell " + cell.trajectory.cell_id + " too short for clustering; skipping");
      continue;
    }
    double lo = points.front().cycle, hi = points.back().cycle;
    std::vector<double> row(static_cast<std::size_t>(grid));
    std::size_t seg = 0;
    for (int gidx = 0; gidx < grid; ++gidx) {
      double x = lo + (hi - lo) * static_cast<double>(gidx) / static_cast<double>(grid - 1);
      while (seg + 2 < points.size() && static_cast<double>(points[seg + 1].cycle) < x) ++seg;
      double x0 = points[seg].cycle, x1 = points[seg + 1].cycle;
      double y0 = points[seg].soh, y1 = points[seg + 1].soh;
      row[static_cast<std::size_t>(gidx)] =
          x1 > x0 ? y0 + (y1 - y0) * (x - x0) / (x1 - x0) : y0;
    }
    matrix.push_back(std::move(row));
    used.push_back(&cell.trajectory);
  }
  if (matrix.size() < 2) throw std::invalid_argument("clustering needs at least 2 usable cells");

  auto embedding = pca(matrix, components);
  auto clusters = kmeans(embedding.scores, k, c.seed);

  csv::Table t;
  t.columns = {"cell_id", "dataset"};
  for (int comp = 0; comp < components; ++comp)
    t.columns.push_back("pc" + std::to_string(comp + 1));
  t.columns.push_back("cluster");
  for (std::size_t i = 0; i < used.size(); ++i) {
    std::vector<std::string> row{used[i]->cell_id, used[i]->dataset_tag};
    for (int comp = 0; comp < components; ++comp)
      row.push_back(fmt(embedding.scores[i][static_cast<std::size_t>(comp)]));
    row.push_back(std::to_string(clusters.labels[i]));
    t.rows.push_back(std::move(row));
  }
  fs::path out_path = c.out / "clusters.csv";
  csv::write(out_path, t);

  csv::Table pca_t;
  pca_t.columns = {"component", "eigenvalue", "explained_variance_ratio"};
  for (std::size_t comp = 0; comp < embedding.eigenvalues.size(); ++comp)
    pca_t.rows.push_back({std::to_string(comp + 1), fmt(embedding.eigenvalues[comp]),
                          fmt(embedding.explained_variance_ratio[comp])});
  csv::write(c.out / "pca.csv", pca_t);

  std::cout << "cluster: k=" << k << " over " << used.size() << " cells, inertia "
            << fmt(clusters.inertia) << " (" << clusters.iterations << " iterations) -> "
            << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int cmd_report(Ctx& c, const std::string& in_flag) {
  fs::path in_dir = in_flag.empty() ? c.out : fs::path(in_flag);
  if (!in_flag.empty() && !fs::exists(in_dir))
    throw std::invalid_argument("missing upstream artifact: " + in_dir.string());

  int tables = 0, plots = 0;
  bool found_any = false;

  // Reliability fits -> Table A2 (global) and A3 (per dataset) layouts.
  if (fs::exists(in_dir / "reliability.csv")) {
    found_any = true;
    csv::Table fits = csv::read(in_dir / "reliability.csv");
    csv::write(c.out / "table_a2.csv", fits);
    ++tables;
    csv::Table by_set;
    by_set.columns = fits.columns;
    std::size_t ds_col = fits.col("dataset");
    for (const auto& row : fits.rows)
      if (row[ds_col] != "all") by_set.rows.push_back(row);
    if (!by_set.rows.empty()) {
      csv::write(c.out / "table_a3.csv", by_set);
      ++tables;
    }
  }

  // Survival curves -> (x, y) series per dataset scope.
  auto emit_curves = [&](const char* file, const std::string& prefix, bool prepend_origin) {
    if (!fs::exists(in_dir / file)) return;
    found_any = true;
    csv::Table t_in = csv::read(in_dir / file);
    std::size_t ds_col = t_in.col("dataset");
    std::size_t t_col = t_in.col("t");
    std::size_t s_col = t_in.col("survival");
    std::vector<std::string> scope_order;
    std::map<std::string, csv::Table> curves;
    for (const auto& row : t_in.rows) {
      auto [it, inserted] = curves.try_emplace(row[ds_col]);
      if (inserted) {
        it->second.columns = {"x", "y"};
        if (prepend_origin) it->second.rows.push_back({"0", "1"});
        scope_order.push_back(row[ds_col]);
      }
      it->second.rows.push_back({row[t_col], row[s_col]});
    }
    for (const auto& scope : scope_order) {
      csv::write(c.out / (prefix + sanitize(scope) + ".csv"), curves[scope]);
      ++plots;
    }
  };
  emit_curves("km.csv", "plot_survival_", true);
  emit_curves("survival_fit.csv", "plot_survival_fit_", false);

  // Histograms of EOL and knee cycles.
  auto emit_hist = [&](const char* file, const char* column, const char* out_name) {
    if (!fs::exists(in_dir / file)) return;
    found_any = true;
    csv::Table t_in = csv::read(in_dir / file);
    std::size_t col = t_in.col(column);
    std::vector<double> values;
    for (const auto& row : t_in.rows)
      if (!row[col].empty()) values.push_back(csv::parse_double(row[col]));
    if (values.empty()) return;
    csv::write(c.out / out_name, histogram_table(std::move(values), 10));
    ++plots;
  };
  emit_hist("trajectories.csv", "eol_cycle", "plot_hist_eol.csv");
  emit_hist("knees.csv", "knee_cycle", "plot_hist_knee.csv");

  // Knee statistics -> Table 3 / Table 4 layouts.
  if (fs::exists(in_dir / "knee_stats.csv")) {
    found_any = true;
    csv::write(c.out / "table3.csv", csv::read(in_dir / "knee_stats.csv"));
    ++tables;
  }
  if (fs::exists(in_dir / "knee_correlations.csv")) {
    found_any = true;
    csv::write(c.out / "table4.csv", csv::read(in_dir / "knee_correlations.csv"));
    ++tables;
  }

  // Model evaluations -> Table 2 (early-life RUL), Table 7 (early vs full
  // feature sets), Table A1 (SOH horizons).
  std::vector<fs::path> eval_files;
  if (fs::exists(in_dir))
    for (const auto& entry : fs::directory_iterator(in_dir)) {
      std::string name = entry.path().filename().string();
      if (name.rfind("eval_", 0) == 0 && name.size() > 9 &&
          name.substr(name.size() - 4) == ".csv")
        eval_files.push_back(entry.path());
    }
  std::sort(eval_files.begin(), eval_files.end());

  struct EvalRow {
    std::string model, target, mode;
    int input_cycles = 0;
    std::string n_cells, rmse, rmse_std, mae, mape, mape_std, r2;
  };
  std::vector<EvalRow> eval_rows;
  for (const auto& path : eval_files) {
    csv::Table t_in = csv::read(path);
    found_any = true;
    for (const auto& row : t_in.rows) {
      EvalRow e;
      e.model = row[t_in.col("model")];
      e.target = row[t_in.col("target")];
      e.mode = row[t_in.col("mode")];
      e.input_cycles = static_cast<int>(csv::parse_double(row[t_in.col("input_cycles")]));
      e.n_cells = row[t_in.col("n_cells")];
      e.rmse = row[t_in.col("rmse_mean")];
      e.rmse_std = row[t_in.col("rmse_std")];
      e.mae = row[t_in.col("mae_mean")];
      e.mape = row[t_in.col("mape_mean")];
      e.mape_std = row[t_in.col("mape_std")];
      e.r2 = row[t_in.col("r2_mean")];
      eval_rows.push_back(std::move(e));
    }
  }
  if (!eval_rows.empty()) {
    std::stable_sort(eval_rows.begin(), eval_rows.end(), [](const EvalRow& a, const EvalRow& b) {
      return std::tie(a.model, a.input_cycles) < std::tie(b.model, b.input_cycles);
    });
    csv::Table t2;
    t2.columns = {"model", "input_cycles", "rmse", "mae", "r2"};
    csv::Table t7;
    t7.columns = {"feature_set", "model", "input_cycles", "rmse", "mae", "r2"};
    csv::Table ta1;
    ta1.columns = {"horizon_cycles", "n_cells", "rmse_mean", "rmse_std", "mape_mean", "mape_std"};
    bool any_linear_soh = std::any_of(eval_rows.begin(), eval_rows.end(), [](const EvalRow& e) {
      return e.target == "soh" && e.model == "linear";
    });
    for (const auto& e : eval_rows) {
      if (e.target == "rul" && e.mode == "early_life")
        t2.rows.push_back({e.model, std::to_string(e.input_cycles), e.rmse, e.mae, e.r2});
      if (e.target == "rul")
        t7.rows.push_back({e.mode, e.model, std::to_string(e.input_cycles), e.rmse, e.mae, e.r2});
      if (e.target == "soh" && (!any_linear_soh || e.model == "linear"))
        ta1.rows.push_back({std::to_string(e.input_cycles), e.n_cells, e.rmse, e.rmse_std, e.mape,
                            e.mape_std});
    }
    if (!t2.rows.empty()) {
      csv::write(c.out / "table2.csv", t2);
      ++tables;
    }
    if (!t7.rows.empty()) {
      csv::write(c.out / "table7.csv", t7);
      ++tables;
    }
    if (!ta1.rows.empty()) {
      csv::write(c.out / "table_a1.csv", ta1);
      ++tables;
    }
  }

  // Cross-dataset matrix -> Table 6 layout + long-form heatmap series.
  if (fs::exists(in_dir / "xeval_matrix.csv")) {
    found_any = true;
    csv::Table matrix = csv::read(in_dir / "xeval_matrix.csv");
    csv::write(c.out / "table6.csv", matrix);
    ++tables;
    csv::Table heat;
    heat.columns = {"x", "y", "value"};
    for (const auto& row : matrix.rows)
      for (std::size_t j = 1; j < matrix.columns.size(); ++j)
        heat.rows.push_back({row[0], matrix.columns[j], row[j]});
    csv::write(c.out / "plot_heatmap_xeval.csv", heat);
    ++plots;
  }

  if (!found_any)
    throw std::invalid_argument("no pipeline artifacts found in " + in_dir.string() +
                                " (run the pipeline subcommands first)");
  std::cout << "report: " << tables << " tables, " << plots << " plot series -> "
            << c.out.string() << "\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Argument parsing and dispatch.
// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
  CLI::App app{"battery degradation trajectories: harmonisation, INR fitting, knee/EOL "
               "analysis, lifetime statistics, and early-life RUL prediction"};
  app.name("kneesight");
  app.require_subcommand(1);

  std::vector<std::pair<CLI::App*, std::function<int()>>> handlers;

  // synth
  {
    auto* sub = app.add_subcommand("synth", "generate a synthetic degradation population");
    auto common = std::make_shared<CommonFlags>();
    auto n_cells = std::make_shared<int>(100);
    auto tag = std::make_shared<std::string>("synthetic");
    sub->add_option("--n-cells", *n_cells, "population size");
    sub->add_option("--tag", *tag, "dataset tag stamped on every row");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, n_cells, tag] {
      Ctx c = make_ctx(sub, *common);
      return cmd_synth(c, *n_cells, *tag);
    });
  }
  // ingest
  {
    auto* sub = app.add_subcommand("ingest", "harmonise raw time-series into the per-cycle table");
    auto common = std::make_shared<CommonFlags>();
    auto raw = std::make_shared<std::string>();
    auto mapping = std::make_shared<std::string>();
    sub->add_option("--raw", *raw, "raw measurement CSV");
    sub->add_option("--mapping", *mapping, "channel mapping JSON");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, raw, mapping] {
      Ctx c = make_ctx(sub, *common);
      return cmd_ingest(c, *raw, *mapping);
    });
  }
  // features
  {
    auto* sub = app.add_subcommand("features", "summarise capacity trajectories (Q0, EOL)");
    auto common = std::make_shared<CommonFlags>();
    auto cycles = std::make_shared<std::string>();
    sub->add_option("--cycles", *cycles, "per-cycle table (default: <out>/cycles.csv)");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, cycles] {
      Ctx c = make_ctx(sub, *common);
      return cmd_features(c, *cycles);
    });
  }
  // knee
  {
    auto* sub = app.add_subcommand("knee", "detect knee onsets (full-history or early-life)");
    auto common = std::make_shared<CommonFlags>();
    auto flags = std::make_shared<KneeFlags>();
    sub->add_option("--cycles", flags->cycles, "per-cycle table (default: <out>/cycles.csv)");
    sub->add_option("--smoother", flags->smoother, "moving_average|inr_fit")
        ->check(CLI::IsMember({"moving_average", "inr_fit"}));
    sub->add_option("--window", flags->window, "moving-average width (odd, >= 3)");
    sub->add_option("--tau", flags->tau, "absolute curvature threshold (default: adaptive)");
    sub->add_option("--min-prefix", flags->min_prefix, "cycles never flagged as knee");
    sub->add_option("--n-early", flags->n_early, "early-life mode: use only the first N cycles")
        ->check(CLI::IsMember({5, 10, 20}));
    sub->add_option("--variant", flags->variant, "INR variant for smoothing/extrapolation")
        ->check(CLI::IsMember({"mlp_posenc", "siren", "fourier", "rbf"}));
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, flags] {
      Ctx c = make_ctx(sub, *common);
      return cmd_knee(c, *flags);
    });
  }
  // fit-inr
  {
    auto* sub = app.add_subcommand("fit-inr", "fit a capacity INR to one cell");
    auto common = std::make_shared<CommonFlags>();
    auto cycles = std::make_shared<std::string>();
    auto cell = std::make_shared<std::string>();
    auto variant = std::make_shared<std::string>();
    sub->add_option("--cycles", *cycles, "per-cycle table (default: <out>/cycles.csv)");
    sub->add_option("--cell", *cell, "cell id (default: first cell)");
    sub->add_option("--variant", *variant, "mlp_posenc|siren|fourier|rbf")
        ->check(CLI::IsMember({"mlp_posenc", "siren", "fourier", "rbf"}));
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, cycles, cell, variant] {
      Ctx c = make_ctx(sub, *common);
      return cmd_fit_inr(c, *cycles, *cell, *variant);
    });
  }
  // reliability
  {
    auto* sub = app.add_subcommand("reliability", "fit lifetime distributions per dataset");
    auto common = std::make_shared<CommonFlags>();
    auto traj = std::make_shared<std::string>();
    auto family = std::make_shared<std::string>("weibull");
    sub->add_option("--trajectories", *traj,
                    "trajectory summary (default: <out>/trajectories.csv)");
    sub->add_option("--family", *family, "family for the plotted survival curve")
        ->check(CLI::IsMember({"weibull", "lognormal"}));
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, traj, family] {
      Ctx c = make_ctx(sub, *common);
      return cmd_reliability(c, *traj, *family);
    });
  }
  // stats
  {
    auto* sub = app.add_subcommand("stats", "EOL/knee correlation and group statistics");
    auto common = std::make_shared<CommonFlags>();
    auto traj = std::make_shared<std::string>();
    auto knees = std::make_shared<std::string>();
    sub->add_option("--trajectories", *traj,
                    "trajectory summary (default: <out>/trajectories.csv)");
    sub->add_option("--knees", *knees, "knee report (default: <out>/knees.csv)");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, traj, knees] {
      Ctx c = make_ctx(sub, *common);
      return cmd_stats(c, *traj, *knees);
    });
  }
  // predict
  {
    auto* sub = app.add_subcommand("predict", "cross-validated SOH/RUL prediction");
    auto common = std::make_shared<CommonFlags>();
    auto flags = std::make_shared<PredictFlags>();
    sub->add_option("--cycles", flags->cycles, "per-cycle table (default: <out>/cycles.csv)");
    sub->add_option("--mode", flags->mode, "early|full feature scope")
        ->check(CLI::IsMember({"early", "full"}));
    sub->add_option("--n-early", flags->n_early, "early-life window N")
        ->check(CLI::IsMember({5, 10, 20}));
    sub->add_option("--model", flags->model, "linear|polynomial|forest|inr")
        ->check(CLI::IsMember({"linear", "polynomial", "forest", "inr"}));
    sub->add_option("--target", flags->target, "rul|soh")
        ->check(CLI::IsMember({"rul", "soh"}));
    sub->add_option("--folds", flags->folds, "cell-level CV folds");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, flags] {
      Ctx c = make_ctx(sub, *common);
      return cmd_predict(c, *flags);
    });
  }
  // xeval
  {
    auto* sub = app.add_subcommand("xeval", "train-on-A / test-on-B RMSE matrix across tags");
    auto common = std::make_shared<CommonFlags>();
    auto flags = std::make_shared<PredictFlags>();
    sub->add_option("--cycles", flags->cycles, "per-cycle table (default: <out>/cycles.csv)");
    sub->add_option("--mode", flags->mode, "early|full feature scope")
        ->check(CLI::IsMember({"early", "full"}));
    sub->add_option("--n-early", flags->n_early, "early-life window N")
        ->check(CLI::IsMember({5, 10, 20}));
    sub->add_option("--model", flags->model, "linear|polynomial|forest|inr")
        ->check(CLI::IsMember({"linear", "polynomial", "forest", "inr"}));
    sub->add_option("--target", flags->target, "rul|soh")
        ->check(CLI::IsMember({"rul", "soh"}));
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, flags] {
      Ctx c = make_ctx(sub, *common);
      return cmd_xeval(c, *flags);
    });
  }
  // cluster
  {
    auto* sub = app.add_subcommand("cluster", "PCA + k-means over trajectory shapes");
    auto common = std::make_shared<CommonFlags>();
    auto cycles = std::make_shared<std::string>();
    auto k = std::make_shared<int>(4);
    auto components = std::make_shared<int>(2);
    sub->add_option("--cycles", *cycles, "per-cycle table (default: <out>/cycles.csv)");
    sub->add_option("--k", *k, "number of clusters");
    sub->add_option("--components", *components, "PCA components kept");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, cycles, k, components] {
      Ctx c = make_ctx(sub, *common);
      return cmd_cluster(c, *cycles, *k, *components);
    });
  }
  // report
  {
    auto* sub = app.add_subcommand("report", "aggregate artifacts into table/plot CSVs");
    auto common = std::make_shared<CommonFlags>();
    auto in_dir = std::make_shared<std::string>();
    sub->add_option("--in", *in_dir, "artifact directory to aggregate (default: --out)");
    add_common(sub, *common);
    handlers.emplace_back(sub, [sub, common, in_dir] {
      Ctx c = make_ctx(sub, *common);
      return cmd_report(c, *in_dir);
    });
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << app.help();
      return 0;
    }
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    for (auto& [sub, handler] : handlers)
      if (sub->parsed()) return handler();
    std::cerr << "error: no subcommand selected\n" << app.help();
    return 1;
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace kneesight::cli
