#include "kneesight/predict.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "kneesight/common.hpp"
#include "kneesight/log.hpp"
#include "kneesight/rng.hpp"
#include "kneesight/stats.hpp"

namespace kneesight {
namespace {

// Least-squares slope of y against x; throws when the x spread is zero.
double ls_slope(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx <= 0) throw std::invalid_argument("slope undefined: zero cycle spread");
  return sxy / sxx;
}

struct PrefixBlock {
  double q0 = 0;
  std::vector<double> soh;
  double slope_all = 0;
  double slope_late = 0;
  int first_cycle = 0;
  int last_cycle = 0;  // cycle value of the N-th prefix point
};

PrefixBlock prefix_block(const CapacityTrajectory& traj, int n_window) {
  PrefixBlock block;
  block.q0 = traj.q0;
  std::vector<double> cyc, soh;
  for (int i = 0; i < n_window; ++i) {
    cyc.push_back(traj.points[i].cycle);
    soh.push_back(traj.points[i].soh);
  }
  block.soh = soh;
  block.first_cycle = traj.points.front().cycle;
  block.last_cycle = traj.points[n_window - 1].cycle;
  block.slope_all = ls_slope(cyc, soh);
  const std::size_t late = (n_window + 1) / 2;
  const std::size_t off = n_window - late;
  block.slope_late = ls_slope(std::span(cyc).subspan(off), std::span(soh).subspan(off));
  return block;
}

// Mean of the finite entries; nullopt when none are finite.
std::optional<double> finite_mean(const std::vector<double>& values) {
  double sum = 0;
  int count = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++count;
    }
  if (count == 0) return std::nullopt;
  return sum / count;
}

struct StressorSummary {
  std::optional<double> current, temp;
};

StressorSummary prefix_stressors(const CellRecord& cell, int last_cycle) {
  std::vector<double> currents, temps;
  for (const CycleRow& row : cell.rows)
    if (row.cycle_index <= last_cycle) {
      currents.push_back(row.mean_current_a);
      temps.push_back(row.mean_temp_c);
    }
  return {finite_mean(currents), finite_mean(temps)};
}

void require_finite_features(const SupervisedDataset& ds, const char* caller) {
  for (const DatasetRow& row : ds.rows) {
    for (double v : row.features)
      if (!std::isfinite(v))
        throw std::invalid_argument(std::string(caller) + ": non-finite feature in cell " +
                                    row.cell_id);
    if (!std::isfinite(row.target))
      throw std::invalid_argument(std::string(caller) + ": non-finite target in cell " +
                                  row.cell_id);
  }
}

// ---------------------------------------------------------------- baselines

// All exponent tuples over n_features with total degree 1..degree, ordered
// by total degree then lexicographically (higher first-feature powers
// first), so the expansion is reproducible from (n_features, degree).
std::vector<std::vector<int>> monomial_terms(std::size_t n_features, int degree) {
  std::vector<std::vector<int>> terms;
  std::vector<int> current(n_features, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t idx, int remaining) {
    if (idx + 1 == n_features) {
      current[idx] = remaining;
      terms.push_back(current);
      current[idx] = 0;
      return;
    }
    for (int e = remaining; e >= 0; --e) {
      current[idx] = e;
      rec(idx + 1, remaining - e);
    }
    current[idx] = 0;
  };
  for (int total = 1; total <= degree; ++total) rec(0, total);
  return terms;
}

double eval_term(const std::vector<int>& exponents, std::span<const double> x) {
  double value = 1;
  for (std::size_t j = 0; j < exponents.size(); ++j)
    for (int e = 0; e < exponents[j]; ++e) value *= x[j];
  return value;
}

// In-place Cholesky solve of A beta = b for symmetric positive-definite A;
// returns false when a pivot collapses.
bool cholesky_solve(std::vector<double> a, std::vector<double> b, std::size_t n,
                    std::vector<double>& out) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) sum -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (!(sum > 0) || !std::isfinite(sum)) return false;
        a[i * n + i] = std::sqrt(sum);
      } else {
        a[i * n + j] = sum / a[j * n + j];
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sum = b[i];
    for (std::size_t k = 0; k < i; ++k) sum -= a[i * n + k] * b[k];
    b[i] = sum / a[i * n + i];
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double sum = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) sum -= a[k * n + ii] * b[k];
    b[ii] = sum / a[ii * n + ii];
  }
  out = std::move(b);
  return true;
}

// ------------------------------------------------------------------ forest

struct TreeBuilder {
  const std::vector<DatasetRow>& rows;
  const ForestConfig& cfg;
  std::size_t n_features;
  Rng rng;
  std::vector<int> work;  // row indices, partitioned in place per node
  std::vector<TreeNode> nodes;
  std::vector<int> feature_pool;

  TreeBuilder(const std::vector<DatasetRow>& rows_, const ForestConfig& cfg_,
              std::size_t n_features_, std::uint64_t seed)
      : rows(rows_), cfg(cfg_), n_features(n_features_), rng(seed) {
    feature_pool.resize(n_features);
    std::iota(feature_pool.begin(), feature_pool.end(), 0);
  }

  int build(int lo, int hi, int depth) {
    const int count = hi - lo;
    double lo_t = std::numeric_limits<double>::infinity(), hi_t = -lo_t;
    double sum = 0, sum2 = 0;
    for (int i = lo; i < hi; ++i) {
      const double y = rows[work[i]].target;
      lo_t = std::min(lo_t, y);
      hi_t = std::max(hi_t, y);
      sum += y;
      sum2 += y * y;
    }
    const auto leaf = [&](double value) {
      nodes.push_back(TreeNode{-1, 0, -1, -1, value});
      return static_cast<int>(nodes.size()) - 1;
    };
    // Pure leaves carry the shared target verbatim so single-row and
    // constant-target leaves reproduce training targets exactly.
    if (lo_t == hi_t) return leaf(lo_t);
    if (count < cfg.min_samples_split) return leaf(sum / count);
    if (cfg.max_depth > 0 && depth >= cfg.max_depth) return leaf(sum / count);

    const double parent_sse = std::max(0.0, sum2 - sum * sum / count);
    std::size_t mtry = cfg.features_per_split > 0
                           ? std::min<std::size_t>(cfg.features_per_split, n_features)
                           : (n_features + 2) / 3;
    // Partial Fisher-Yates: the first mtry pool entries become the
    // candidate features for this node.
    for (std::size_t j = 0; j < mtry; ++j) {
      const std::size_t pick = j + rng.index(n_features - j);
      std::swap(feature_pool[j], feature_pool[pick]);
    }

    int best_feature = -1;
    double best_threshold = 0;
    double best_sse = parent_sse;
    std::vector<std::pair<double, double>> order;  // (feature value, target)
    for (std::size_t j = 0; j < mtry; ++j) {
      const int f = feature_pool[j];
      order.clear();
      for (int i = lo; i < hi; ++i)
        order.emplace_back(rows[work[i]].features[f], rows[work[i]].target);
      std::sort(order.begin(), order.end());
      double left_sum = 0, left_sum2 = 0;
      for (int i = 0; i + 1 < count; ++i) {
        left_sum += order[i].second;
        left_sum2 += order[i].second * order[i].second;
        if (order[i].first == order[i + 1].first) continue;
        const int nl = i + 1, nr = count - nl;
        const double right_sum = sum - left_sum;
        const double right_sum2 = sum2 - left_sum2;
        const double sse = std::max(0.0, left_sum2 - left_sum * left_sum / nl) +
                           std::max(0.0, right_sum2 - right_sum * right_sum / nr);
        if (sse < best_sse) {
          best_sse = sse;
          best_feature = f;
          best_threshold = 0.5 * (order[i].first + order[i + 1].first);
        }
      }
    }
    if (best_feature < 0) return leaf(sum / count);

    const auto mid_it =
        std::partition(work.begin() + lo, work.begin() + hi, [&](int row_idx) {
          return rows[row_idx].features[best_feature] <= best_threshold;
        });
    const int mid = static_cast<int>(mid_it - work.begin());
    if (mid == lo || mid == hi) return leaf(sum / count);  // numerically stuck

    const int self = static_cast<int>(nodes.size());
    nodes.push_back(TreeNode{best_feature, best_threshold, -1, -1, 0});
    const int left = build(lo, mid, depth + 1);
    const int right = build(mid, hi, depth + 1);
    nodes[self].left = left;
    nodes[self].right = right;
    return self;
  }
};

std::vector<TreeNode> build_tree(const SupervisedDataset& ds, const ForestConfig& cfg,
                                 std::uint64_t seed) {
  TreeBuilder builder(ds.rows, cfg, ds.feature_names.size(), seed);
  const int n = static_cast<int>(ds.rows.size());
  builder.work.resize(n);
  if (cfg.bootstrap) {
    for (int i = 0; i < n; ++i)
      builder.work[i] = static_cast<int>(builder.rng.index(n));
  } else {
    std::iota(builder.work.begin(), builder.work.end(), 0);
  }
  builder.build(0, n, 0);
  return std::move(builder.nodes);
}

double tree_predict(const std::vector<TreeNode>& nodes, std::span<const double> x) {
  int at = 0;
  while (nodes[at].feature >= 0)
    at = x[nodes[at].feature] <= nodes[at].threshold ? nodes[at].left : nodes[at].right;
  return nodes[at].value;
}

// ------------------------------------------------------------------- misc

double rmse_of(std::span<const double> preds, std::span<const double> targets) {
  double sse = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = preds[i] - targets[i];
    sse += e * e;
  }
  return std::sqrt(sse / preds.size());
}

SupervisedDataset subset(const SupervisedDataset& ds, const std::vector<int>& folds,
                         int fold, bool keep) {
  SupervisedDataset out;
  out.feature_names = ds.feature_names;
  out.target_kind = ds.target_kind;
  out.early_window = ds.early_window;
  out.leakage_class = ds.leakage_class;
  out.tag = ds.tag;
  for (std::size_t i = 0; i < ds.rows.size(); ++i)
    if ((folds[i] == fold) == keep) out.rows.push_back(ds.rows[i]);
  return out;
}

double population_std(const std::vector<double>& values, double mean) {
  double acc = 0;
  for (double v : values) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / values.size());
}

}  // namespace

std::string to_string(TargetKind t) {
  return t == TargetKind::soh ? "soh" : "rul";
}

TargetKind target_kind_from_string(const std::string& name) {
  if (name == "soh") return TargetKind::soh;
  if (name == "rul") return TargetKind::rul;
  throw std::invalid_argument("unknown target kind: " + name);
}

std::string to_string(LeakageClass c) {
  return c == LeakageClass::early_life ? "early_life" : "full_trajectory";
}

void validate(const DatasetConfig& cfg) {
  if (cfg.early_window < 4)
    throw std::invalid_argument("early_window must be at least 4 observed points");
  validate(cfg.knee);
  if (cfg.mode == LeakageClass::early_life) validate(cfg.early_knee_inr);
}

SupervisedDataset make_dataset(std::span<const CellRecord> cells, const DatasetConfig& cfg) {
  validate(cfg);
  if (cells.empty()) throw std::invalid_argument("make_dataset: no cells supplied");
  const int n_window = cfg.early_window;
  const bool early = cfg.mode == LeakageClass::early_life;

  struct CellScratch {
    const CellRecord* cell;
    PrefixBlock block;
    StressorSummary stress;
    double knee_feature = 0;
    double max_kappa = 0;  // full mode only
  };
  std::vector<CellScratch> usable;
  int skipped = 0;
  for (const CellRecord& cell : cells) {
    if (static_cast<int>(cell.trajectory.points.size()) < n_window) {
      ++skipped;
      continue;
    }
    CellScratch scratch;
    scratch.cell = &cell;
    scratch.block = prefix_block(cell.trajectory, n_window);
    scratch.stress = prefix_stressors(cell, scratch.block.last_cycle);
    if (early) {
      CapacityTrajectory prefix = cell.trajectory;
      prefix.points.resize(n_window);
      const KneeReport report = early_life_knee(prefix, cfg.knee, cfg.early_knee_inr);
      scratch.knee_feature = report.knee_cycle
                                 ? static_cast<double>(*report.knee_cycle)
                                 : static_cast<double>(scratch.block.first_cycle + 3 * n_window);
    } else {
      const KneeReport report = detect_knee(cell.trajectory, cfg.knee);
      if (cell.trajectory.knee_cycle)
        scratch.knee_feature = *cell.trajectory.knee_cycle;
      else if (report.knee_cycle)
        scratch.knee_feature = *report.knee_cycle;
      else
        scratch.knee_feature = cell.trajectory.points.back().cycle;
      for (const CurvaturePoint& p : report.curvature_series)
        scratch.max_kappa = std::max(scratch.max_kappa, std::fabs(p.kappa));
    }
    usable.push_back(std::move(scratch));
  }
  if (skipped > 0)
    log_info("make_dataset: skipped " + std::to_string(skipped) + " cells shorter than " +
             std::to_string(n_window) + " points");
  if (usable.empty())
    throw std::invalid_argument("make_dataset: no cell provides the requested window");

  bool with_current = true, with_temp = true;
  for (const CellScratch& s : usable) {
    with_current = with_current && s.stress.current.has_value();
    with_temp = with_temp && s.stress.temp.has_value();
  }

  SupervisedDataset ds;
  ds.target_kind = cfg.target;
  ds.early_window = n_window;
  ds.leakage_class = cfg.mode;
  ds.feature_names = {"cycle", "q0"};
  for (int j = 1; j <= n_window; ++j) ds.feature_names.push_back("soh_" + std::to_string(j));
  ds.feature_names.push_back("slope_all");
  ds.feature_names.push_back("slope_late");
  if (early) {
    ds.feature_names.push_back("early_knee");
  } else {
    ds.feature_names.push_back("knee_cycle");
    ds.feature_names.push_back("max_abs_curvature");
  }
  if (with_current) ds.feature_names.push_back("mean_current");
  if (with_temp) ds.feature_names.push_back("mean_temp");

  for (const CellScratch& s : usable) {
    const CapacityTrajectory& traj = s.cell->trajectory;
    if (cfg.target == TargetKind::rul && !traj.eol_cycle)
      throw std::invalid_argument("make_dataset: cell " + traj.cell_id +
                                  " has no EOL annotation for rul targets");
    std::vector<double> base;
    base.push_back(0);  // cycle, filled per row
    base.push_back(s.block.q0);
    for (double v : s.block.soh) base.push_back(v);
    base.push_back(s.block.slope_all);
    base.push_back(s.block.slope_late);
    base.push_back(s.knee_feature);
    if (!early) base.push_back(s.max_kappa);
    if (with_current) base.push_back(*s.stress.current);
    if (with_temp) base.push_back(*s.stress.temp);

    const std::size_t n_rows =
        early ? static_cast<std::size_t>(n_window) : traj.points.size();
    for (std::size_t i = 0; i < n_rows; ++i) {
      const TrajectoryPoint& p = traj.points[i];
      double target;
      if (cfg.target == TargetKind::rul) {
        target = static_cast<double>(*traj.eol_cycle - p.cycle);
        if (target < 0) continue;  // past end of life
      } else {
        target = p.soh;
      }
      DatasetRow row;
      row.cell_id = traj.cell_id;
      row.features = base;
      row.features[0] = p.cycle;
      row.target = target;
      ds.rows.push_back(std::move(row));
    }
  }
  if (ds.rows.empty())
    throw std::invalid_argument("make_dataset: every candidate row fell past EOL");

  ds.tag = usable.front().cell->trajectory.dataset_tag;
  for (const CellScratch& s : usable)
    if (s.cell->trajectory.dataset_tag != ds.tag) {
      ds.tag = "mixed";
      break;
    }
  return ds;
}

int leakage_audit(const SupervisedDataset& dataset, std::span<const CellRecord> cells,
                  const DatasetConfig& cfg) {
  if (dataset.leakage_class != LeakageClass::early_life)
    throw std::invalid_argument("leakage_audit applies to early_life datasets");
  const int n_window = cfg.early_window;
  std::vector<CellRecord> truncated;
  for (const CellRecord& cell : cells) {
    if (static_cast<int>(cell.trajectory.points.size()) < n_window) continue;
    CellRecord cut;
    cut.trajectory = cell.trajectory;
    cut.trajectory.points.resize(n_window);
    const int last_cycle = cut.trajectory.points.back().cycle;
    for (const CycleRow& row : cell.rows)
      if (row.cycle_index <= last_cycle) cut.rows.push_back(row);
    truncated.push_back(std::move(cut));
  }
  const SupervisedDataset rebuilt = make_dataset(truncated, cfg);
  if (rebuilt.feature_names != dataset.feature_names ||
      rebuilt.rows.size() != dataset.rows.size())
    return static_cast<int>(dataset.rows.size());
  int mismatches = 0;
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    const auto& a = dataset.rows[i];
    const auto& b = rebuilt.rows[i];
    if (a.cell_id != b.cell_id || a.features.size() != b.features.size() ||
        std::memcmp(a.features.data(), b.features.data(),
                    a.features.size() * sizeof(double)) != 0)
      ++mismatches;
  }
  return mismatches;
}

std::vector<int> cell_level_split(const SupervisedDataset& dataset, int n_folds,
                                  std::uint64_t seed) {
  if (n_folds < 2) throw std::invalid_argument("need at least 2 folds");
  std::vector<std::string> cells;
  std::map<std::string, int> fold_of;
  for (const DatasetRow& row : dataset.rows)
    if (fold_of.emplace(row.cell_id, -1).second) cells.push_back(row.cell_id);
  if (static_cast<int>(cells.size()) < n_folds)
    throw std::invalid_argument("fewer distinct cells (" + std::to_string(cells.size()) +
                                ") than folds (" + std::to_string(n_folds) + ")");
  Rng rng(derive_seed(seed, 0));
  for (std::size_t i = cells.size(); i-- > 1;)
    std::swap(cells[i], cells[rng.index(i + 1)]);
  for (std::size_t i = 0; i < cells.size(); ++i)
    fold_of[cells[i]] = static_cast<int>(i % n_folds);
  std::vector<int> folds;
  folds.reserve(dataset.rows.size());
  for (const DatasetRow& row : dataset.rows) folds.push_back(fold_of[row.cell_id]);
  return folds;
}

BaselineModel fit_baseline(const SupervisedDataset& dataset, BaselineKind kind, int degree) {
  if (kind == BaselineKind::linear) degree = 1;
  if (degree < 1) throw std::invalid_argument("polynomial degree must be >= 1");
  if (dataset.rows.empty() || dataset.feature_names.empty())
    throw std::invalid_argument("fit_baseline: empty dataset");
  require_finite_features(dataset, "fit_baseline");

  BaselineModel model;
  model.kind = kind;
  model.degree = degree;
  model.n_features = dataset.feature_names.size();
  model.terms = monomial_terms(model.n_features, degree);
  const std::size_t p = model.terms.size() + 1;  // + intercept
  if (p > 2000)
    throw std::invalid_argument("polynomial expansion too large (" + std::to_string(p) +
                                " terms)");
  const std::size_t n = dataset.rows.size();
  if (n < p)
    throw std::invalid_argument("fit_baseline: " + std::to_string(n) + " rows cannot fit " +
                                std::to_string(p) + " coefficients");

  std::vector<double> a(p * p, 0.0), b(p, 0.0), phi(p);
  for (const DatasetRow& row : dataset.rows) {
    phi[0] = 1;
    for (std::size_t t = 0; t < model.terms.size(); ++t)
      phi[t + 1] = eval_term(model.terms[t], row.features);
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j <= i; ++j) a[i * p + j] += phi[i] * phi[j];
      b[i] += phi[i] * row.target;
    }
  }
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = i + 1; j < p; ++j) a[i * p + j] = a[j * p + i];

  if (!cholesky_solve(a, b, p, model.coefficients)) {
    std::vector<double> jittered = a;
    for (std::size_t i = 0; i < p; ++i) jittered[i * p + i] += 1e-10;
    if (!cholesky_solve(jittered, b, p, model.coefficients))
      throw numeric_error("fit_baseline: normal equations singular even after 1e-10 jitter");
    log_debug("fit_baseline: applied 1e-10 ridge jitter to a singular system");
  }
  return model;
}

double predict(const BaselineModel& model, std::span<const double> x) {
  if (x.size() != model.n_features)
    throw std::invalid_argument("baseline predict: feature count mismatch");
  double value = model.coefficients[0];
  for (std::size_t t = 0; t < model.terms.size(); ++t)
    value += model.coefficients[t + 1] * eval_term(model.terms[t], x);
  return value;
}

void validate(const ForestConfig& cfg) {
  if (cfg.n_trees < 1) throw std::invalid_argument("n_trees must be >= 1");
  if (cfg.min_samples_split < 2)
    throw std::invalid_argument("min_samples_split must be >= 2");
  if (cfg.max_depth < 0) throw std::invalid_argument("max_depth must be >= 0");
  if (cfg.features_per_split < 0)
    throw std::invalid_argument("features_per_split must be >= 0");
}

ForestModel fit_forest(const SupervisedDataset& dataset, const ForestConfig& cfg, int jobs) {
  validate(cfg);
  if (dataset.rows.empty() || dataset.feature_names.empty())
    throw std::invalid_argument("fit_forest: empty dataset");
  require_finite_features(dataset, "fit_forest");
  for (const DatasetRow& row : dataset.rows)
    if (row.features.size() != dataset.feature_names.size())
      throw std::invalid_argument("fit_forest: ragged feature vectors");

  ForestModel model;
  model.config = cfg;
  model.n_features = dataset.feature_names.size();
  model.trees.resize(cfg.n_trees);
  parallel_for(static_cast<std::size_t>(cfg.n_trees), jobs, [&](std::size_t t) {
    model.trees[t] = build_tree(dataset, cfg, derive_seed(cfg.seed, t));
  });
  return model;
}

double predict(const ForestModel& model, std::span<const double> x) {
  if (x.size() != model.n_features)
    throw std::invalid_argument("forest predict: feature count mismatch");
  double sum = 0;
  for (const auto& tree : model.trees) sum += tree_predict(tree, x);
  return sum / model.trees.size();
}

UncertainPrediction predict_with_variance(const ForestModel& model,
                                          std::span<const double> x) {
  if (x.size() != model.n_features)
    throw std::invalid_argument("forest predict: feature count mismatch");
  std::vector<double> outputs;
  outputs.reserve(model.trees.size());
  for (const auto& tree : model.trees) outputs.push_back(tree_predict(tree, x));
  double mean = 0;
  for (double o : outputs) mean += o;
  mean /= outputs.size();
  double var = 0;
  for (double o : outputs) var += (o - mean) * (o - mean);
  var /= outputs.size();
  return {mean, std::sqrt(std::max(0.0, var)), UncertaintySource::forest_ensemble};
}

InrRegressor fit_inr_regressor(const SupervisedDataset& dataset, InrConfig cfg,
                               double val_fraction) {
  if (dataset.rows.empty()) throw std::invalid_argument("fit_inr_regressor: empty dataset");
  if (!(val_fraction >= 0) || val_fraction >= 1)
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
  require_finite_features(dataset, "fit_inr_regressor");
  const std::size_t d = dataset.feature_names.size();
  for (std::size_t j = 0; j < d; ++j) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const DatasetRow& row : dataset.rows) {
      lo = std::min(lo, row.features[j]);
      hi = std::max(hi, row.features[j]);
    }
    if (!(hi > lo))
      throw std::invalid_argument("fit_inr_regressor: feature '" +
                                  dataset.feature_names[j] +
                                  "' has zero spread; drop it before training");
  }

  std::vector<TrainingSample> samples;
  samples.reserve(dataset.rows.size());
  for (const DatasetRow& row : dataset.rows)
    samples.push_back({row.features, {row.target}});

  cfg.input_dim = static_cast<int>(d);
  cfg.output_dim = 1;
  InrRegressor reg;
  reg.model = init_model(cfg);
  if (val_fraction > 0 && samples.size() >= 5) {
    auto [train_set, val_set] = split_train_val(samples, val_fraction);
    TrainOptions opts;
    opts.early_stop_patience = 10;
    reg.report = train(reg.model, train_set, val_set, opts);
  } else {
    reg.report = train(reg.model, samples, {});
  }
  return reg;
}

double predict(const InrRegressor& reg, std::span<const double> x) {
  return forward(reg.model, x)[0];
}

EvalReport evaluate(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size())
    throw std::invalid_argument("evaluate: length mismatch");
  const std::size_t n = predictions.size();
  if (n < 2) throw std::invalid_argument("evaluate: need at least 2 points");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(predictions[i]) || !std::isfinite(targets[i]))
      throw std::invalid_argument("evaluate: non-finite input at index " + std::to_string(i));

  EvalReport report;
  report.n = static_cast<int>(n);
  double sse = 0, sae = 0, sape = 0, target_mean = 0;
  int mape_n = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = predictions[i] - targets[i];
    sse += e * e;
    sae += std::fabs(e);
    target_mean += targets[i];
    if (targets[i] != 0) {
      sape += std::fabs(e / targets[i]);
      ++mape_n;
    }
  }
  target_mean /= n;
  double ss_tot = 0;
  for (double t : targets) ss_tot += (t - target_mean) * (t - target_mean);
  if (ss_tot <= 0)
    throw std::invalid_argument("evaluate: constant targets make r2 undefined");
  if (mape_n == 0) throw std::invalid_argument("evaluate: all targets zero, mape undefined");

  report.rmse = std::sqrt(sse / n);
  report.mae = sae / n;
  report.mape = 100.0 * sape / mape_n;
  report.r2 = 1.0 - sse / ss_tot;
  report.mape_excluded = static_cast<int>(n) - mape_n;
  report.n_folds = 1;
  report.rmse_mean = report.rmse;
  report.mae_mean = report.mae;
  report.mape_mean = report.mape;
  report.r2_mean = report.r2;
  return report;
}

std::function<double(std::span<const double>)> fit_model(const SupervisedDataset& dataset,
                                                         const ModelSpec& spec) {
  switch (spec.kind) {
    case ModelSpec::Kind::baseline_linear: {
      auto model = std::make_shared<BaselineModel>(
          fit_baseline(dataset, BaselineKind::linear));
      return [model](std::span<const double> x) { return predict(*model, x); };
    }
    case ModelSpec::Kind::baseline_polynomial: {
      auto model = std::make_shared<BaselineModel>(
          fit_baseline(dataset, BaselineKind::polynomial, spec.poly_degree));
      return [model](std::span<const double> x) { return predict(*model, x); };
    }
    case ModelSpec::Kind::forest: {
      auto model = std::make_shared<ForestModel>(fit_forest(dataset, spec.forest, spec.jobs));
      return [model](std::span<const double> x) { return predict(*model, x); };
    }
    case ModelSpec::Kind::inr: {
      auto model = std::make_shared<InrRegressor>(
          fit_inr_regressor(dataset, spec.inr, spec.inr_val_fraction));
      return [model](std::span<const double> x) { return predict(*model, x); };
    }
  }
  throw std::invalid_argument("unknown model kind");
}

EvalReport cross_validate(const SupervisedDataset& dataset, const ModelSpec& spec,
                          int n_folds, std::uint64_t seed) {
  const std::vector<int> folds = cell_level_split(dataset, n_folds, seed);
  std::vector<double> all_preds, all_targets;
  std::vector<double> fold_rmse, fold_mae, fold_mape, fold_r2;
  for (int f = 0; f < n_folds; ++f) {
    const SupervisedDataset train_set = subset(dataset, folds, f, false);
    const SupervisedDataset test_set = subset(dataset, folds, f, true);
    const auto predictor = fit_model(train_set, spec);
    std::vector<double> preds, targets;
    preds.reserve(test_set.rows.size());
    for (const DatasetRow& row : test_set.rows) {
      preds.push_back(predictor(row.features));
      targets.push_back(row.target);
    }
    const EvalReport fold_report = evaluate(preds, targets);
    fold_rmse.push_back(fold_report.rmse);
    fold_mae.push_back(fold_report.mae);
    fold_mape.push_back(fold_report.mape);
    fold_r2.push_back(fold_report.r2);
    all_preds.insert(all_preds.end(), preds.begin(), preds.end());
    all_targets.insert(all_targets.end(), targets.begin(), targets.end());
  }
  EvalReport report = evaluate(all_preds, all_targets);
  report.n_folds = n_folds;
  auto mean_of = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  };
  report.rmse_mean = mean_of(fold_rmse);
  report.rmse_std = population_std(fold_rmse, report.rmse_mean);
  report.mae_mean = mean_of(fold_mae);
  report.mae_std = population_std(fold_mae, report.mae_mean);
  report.mape_mean = mean_of(fold_mape);
  report.mape_std = population_std(fold_mape, report.mape_mean);
  report.r2_mean = mean_of(fold_r2);
  report.r2_std = population_std(fold_r2, report.r2_mean);
  return report;
}

CrossDatasetMatrix cross_dataset_matrix(std::span<const SupervisedDataset> populations,
                                        const ModelSpec& spec) {
  if (populations.size() < 2)
    throw std::invalid_argument("cross_dataset_matrix: need at least 2 populations");
  for (const SupervisedDataset& pop : populations) {
    if (pop.rows.empty())
      throw std::invalid_argument("cross_dataset_matrix: empty population '" + pop.tag + "'");
    if (pop.feature_names != populations.front().feature_names)
      throw std::invalid_argument("cross_dataset_matrix: feature sets differ across tags");
    if (pop.target_kind != populations.front().target_kind)
      throw std::invalid_argument("cross_dataset_matrix: target kinds differ across tags");
  }
  CrossDatasetMatrix out;
  for (const SupervisedDataset& pop : populations) out.tags.push_back(pop.tag);
  out.rmse.assign(populations.size(), std::vector<double>(populations.size(), 0.0));
  for (std::size_t i = 0; i < populations.size(); ++i) {
    const auto predictor = fit_model(populations[i], spec);
    for (std::size_t j = 0; j < populations.size(); ++j) {
      std::vector<double> preds, targets;
      preds.reserve(populations[j].rows.size());
      for (const DatasetRow& row : populations[j].rows) {
        preds.push_back(predictor(row.features));
        targets.push_back(row.target);
      }
      out.rmse[i][j] = rmse_of(preds, targets);
    }
  }
  return out;
}

CalibrationReport calibration_report(std::span<const double> sigmas,
                                     std::span<const double> abs_errors) {
  if (sigmas.size() != abs_errors.size())
    throw std::invalid_argument("calibration_report: length mismatch");
  const std::size_t n = sigmas.size();
  if (n < 10) throw std::invalid_argument("calibration_report: need at least 10 points");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(sigmas[i]) || sigmas[i] < 0)
      throw std::invalid_argument("calibration_report: sigmas must be finite and >= 0");
    if (!std::isfinite(abs_errors[i]) || abs_errors[i] < 0)
      throw std::invalid_argument("calibration_report: errors must be finite and >= 0");
  }

  CalibrationReport report;
  const auto [sig_lo, sig_hi] = std::minmax_element(sigmas.begin(), sigmas.end());
  const auto [err_lo, err_hi] = std::minmax_element(abs_errors.begin(), abs_errors.end());
  if (*sig_lo < *sig_hi && *err_lo < *err_hi) {
    std::vector<double> s(sigmas.begin(), sigmas.end());
    std::vector<double> e(abs_errors.begin(), abs_errors.end());
    report.pearson = correlation(s, e, CorrelationMethod::pearson).estimate;
    report.spearman = correlation(s, e, CorrelationMethod::spearman).estimate;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sigmas[a] != sigmas[b] ? sigmas[a] < sigmas[b] : a < b;
  });

  const int n_bins = 10;
  for (int b = 0; b < n_bins; ++b) {
    const std::size_t lo = b * n / n_bins, hi = (b + 1) * n / n_bins;
    CalibrationBin bin;
    bin.count = static_cast<int>(hi - lo);
    double sum_sigma = 0, sum_sq_err = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      sum_sigma += sigmas[order[i]];
      sum_sq_err += abs_errors[order[i]] * abs_errors[order[i]];
    }
    bin.mean_sigma = sum_sigma / bin.count;
    bin.rmse = std::sqrt(sum_sq_err / bin.count);
    report.bins.push_back(bin);
  }

  double cum_sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_sq += abs_errors[order[i]] * abs_errors[order[i]];
    report.retained_fraction.push_back(static_cast<double>(i + 1) / n);
    report.cumulative_rmse.push_back(std::sqrt(cum_sq / (i + 1)));
  }
  return report;
}

std::vector<FeatureImportance> permutation_importance(
    const std::function<double(std::span<const double>)>& predictor,
    const SupervisedDataset& held_out, std::uint64_t seed) {
  if (held_out.rows.empty() || held_out.feature_names.empty())
    throw std::invalid_argument("permutation_importance: empty dataset");
  const std::size_t n = held_out.rows.size();
  const std::size_t d = held_out.feature_names.size();

  std::vector<double> targets, base_preds;
  for (const DatasetRow& row : held_out.rows) {
    targets.push_back(row.target);
    base_preds.push_back(predictor(row.features));
  }
  const double base_rmse = rmse_of(base_preds, targets);

  const int n_shuffles = 10;
  std::vector<FeatureImportance> ranking;
  std::vector<double> column(n), scratch;
  for (std::size_t j = 0; j < d; ++j) {
    Rng rng(derive_seed(seed, j));
    for (std::size_t i = 0; i < n; ++i) column[i] = held_out.rows[i].features[j];
    double mean_rmse = 0;
    for (int s = 0; s < n_shuffles; ++s) {
      scratch = column;
      for (std::size_t i = n; i-- > 1;) std::swap(scratch[i], scratch[rng.index(i + 1)]);
      std::vector<double> preds(n);
      std::vector<double> x;
      for (std::size_t i = 0; i < n; ++i) {
        x = held_out.rows[i].features;
        x[j] = scratch[i];
        preds[i] = predictor(x);
      }
      mean_rmse += rmse_of(preds, targets);
    }
    ranking.push_back({held_out.feature_names[j], mean_rmse / n_shuffles - base_rmse});
  }
  std::stable_sort(ranking.begin(), ranking.end(),
                   [](const FeatureImportance& a, const FeatureImportance& b) {
                     return a.rmse_increase > b.rmse_increase;
                   });
  return ranking;
}

}  // namespace kneesight
