#include "kneesight/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "kneesight/common.hpp"
#include "kneesight/rng.hpp"
#include "kneesight/special.hpp"

namespace kneesight {

namespace {

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + " contains a non-finite value");
}

// Sum of squared deviations and the mean; the correlation ratio cancels the
// 1/n factors, so plain deviation sums suffice.
struct Moments {
  double mean = 0;
  double ss = 0;
};

Moments moments_of(std::span<const double> v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.ss += (x - m.mean) * (x - m.mean);
  return m;
}

// Pearson on raw values; returns nullopt when either side has zero variance.
std::optional<double> pearson_raw(std::span<const double> x, std::span<const double> y) {
  const Moments mx = moments_of(x), my = moments_of(y);
  if (mx.ss == 0 || my.ss == 0) return std::nullopt;
  double cov = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    cov += (x[i] - mx.mean) * (y[i] - my.mean);
  const double r = cov / std::sqrt(mx.ss * my.ss);
  return std::clamp(r, -1.0, 1.0);
}

// Average ranks (1-based); tied runs share their mean rank.
std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double shared = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> estimate_raw(std::span<const double> x, std::span<const double> y,
                                   CorrelationMethod method) {
  if (method == CorrelationMethod::pearson) return pearson_raw(x, y);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson_raw(rx, ry);
}

// Linear-interpolation quantile over a sorted sample.
double sorted_quantile(const std::vector<double>& sorted, double q) {
  const std::size_t m = sorted.size();
  if (m == 1) return sorted[0];
  const double pos = q * static_cast<double>(m - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= m) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

void check_groups(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw std::invalid_argument("need at least two groups");
  for (const auto& g : groups) {
    if (g.size() < 2)
      throw std::invalid_argument("every group needs at least two observations");
    check_finite(g, "group");
  }
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

std::string to_string(CorrelationMethod m) {
  switch (m) {
    case CorrelationMethod::pearson: return "pearson";
    case CorrelationMethod::spearman: return "spearman";
  }
  throw std::invalid_argument("unknown correlation method");
}

CorrelationMethod correlation_method_from_string(const std::string& name) {
  if (name == "pearson") return CorrelationMethod::pearson;
  if (name == "spearman") return CorrelationMethod::spearman;
  throw std::invalid_argument("unknown correlation method: " + name);
}

std::string to_string(GroupTest t) {
  switch (t) {
    case GroupTest::anova_f: return "anova_f";
    case GroupTest::kruskal_wallis: return "kruskal_wallis";
  }
  throw std::invalid_argument("unknown group test");
}

GroupTest group_test_from_string(const std::string& name) {
  if (name == "anova_f") return GroupTest::anova_f;
  if (name == "kruskal_wallis") return GroupTest::kruskal_wallis;
  throw std::invalid_argument("unknown group test: " + name);
}

CorrelationReport correlation(std::span<const double> x, std::span<const double> y,
                              CorrelationMethod method) {
  if (x.size() != y.size()) throw std::invalid_argument("correlation inputs differ in length");
  if (x.size() < 3) throw std::invalid_argument("correlation needs at least 3 pairs");
  check_finite(x, "x");
  check_finite(y, "y");
  const auto est = estimate_raw(x, y, method);
  if (!est) throw std::invalid_argument("correlation input has zero variance");
  CorrelationReport report;
  report.method = method;
  report.estimate = *est;
  report.n = static_cast<int>(x.size());
  return report;
}

CorrelationReport bootstrap_ci(std::span<const double> x, std::span<const double> y,
                               CorrelationMethod method, int b, double level,
                               std::uint64_t seed) {
  if (x.size() < 10) throw std::invalid_argument("bootstrap needs at least 10 pairs");
  if (b < 1) throw std::invalid_argument("bootstrap resample count must be positive");
  if (!(level > 0.0 && level < 1.0))
    throw std::invalid_argument("confidence level must lie in (0, 1)");
  CorrelationReport report = correlation(x, y, method);
  report.bootstrap_b = b;
  report.seed = seed;

  const std::size_t n = x.size();
  std::vector<double> estimates;
  estimates.reserve(static_cast<std::size_t>(b));
  std::vector<double> rx(n), ry(n);
  int degenerate = 0;
  for (int r = 0; r < b; ++r) {
    // Per-resample stream: the result is independent of evaluation order.
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = rng.index(n);
      rx[i] = x[j];
      ry[i] = y[j];
    }
    const auto est = estimate_raw(rx, ry, method);
    if (!est) {
      ++degenerate;
      continue;
    }
    estimates.push_back(*est);
  }
  report.degenerate_resamples = degenerate;
  if (degenerate * 2 > b)
    throw numeric_error("more than half of the bootstrap resamples were degenerate");
  std::sort(estimates.begin(), estimates.end());
  report.ci_low = sorted_quantile(estimates, 0.5 * (1.0 - level));
  report.ci_high = sorted_quantile(estimates, 0.5 * (1.0 + level));
  return report;
}

GroupTestReport group_test(const std::vector<std::vector<double>>& groups,
                           GroupTest test) {
  check_groups(groups);
  const std::size_t k = groups.size();
  std::size_t total = 0;
  for (const auto& g : groups) total += g.size();
  const double N = static_cast<double>(total);

  GroupTestReport report;
  report.test = test;
  for (const auto& g : groups) report.group_sizes.push_back(g.size());

  if (test == GroupTest::anova_f) {
    double grand = 0;
    for (const auto& g : groups)
      for (double v : g) grand += v;
    grand /= N;
    double ssb = 0, ssw = 0;
    for (const auto& g : groups) {
      double mean = 0;
      for (double v : g) mean += v;
      mean /= static_cast<double>(g.size());
      ssb += static_cast<double>(g.size()) * (mean - grand) * (mean - grand);
      for (double v : g) ssw += (v - mean) * (v - mean);
    }
    const double d1 = static_cast<double>(k - 1);
    const double d2 = N - static_cast<double>(k);
    report.df = {d1, d2};
    if (ssw == 0) {
      // All groups internally constant: either no effect at all or a
      // perfectly separated one.
      report.statistic = ssb == 0 ? 0.0 : std::numeric_limits<double>::infinity();
      report.p_value = ssb == 0 ? 1.0 : 0.0;
      return report;
    }
    report.statistic = (ssb / d1) / (ssw / d2);
    report.p_value = special::f_upper_tail(report.statistic, d1, d2);
    return report;
  }

  // Kruskal-Wallis on pooled average ranks with tie correction.
  std::vector<double> pooled;
  pooled.reserve(total);
  for (const auto& g : groups) pooled.insert(pooled.end(), g.begin(), g.end());
  const auto ranks = average_ranks(pooled);
  double h = 0;
  std::size_t offset = 0;
  for (const auto& g : groups) {
    double rank_sum = 0;
    for (std::size_t i = 0; i < g.size(); ++i) rank_sum += ranks[offset + i];
    h += rank_sum * rank_sum / static_cast<double>(g.size());
    offset += g.size();
  }
  h = 12.0 / (N * (N + 1.0)) * h - 3.0 * (N + 1.0);
  // Tie correction: 1 - sum(t^3 - t) / (N^3 - N) over tied runs.
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_sum = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    tie_sum += t * t * t - t;
    i = j + 1;
  }
  const double correction = 1.0 - tie_sum / (N * N * N - N);
  report.df = {static_cast<double>(k - 1)};
  if (correction == 0) {
    // Every pooled observation identical: no evidence against the null.
    report.statistic = 0.0;
    report.p_value = 1.0;
    return report;
  }
  report.statistic = h / correction;
  report.p_value = special::chi2_upper_tail(report.statistic, static_cast<double>(k - 1));
  return report;
}

EffectSizes effect_sizes(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("effect sizes need at least two observations per group");
  check_finite(a, "a");
  check_finite(b, "b");
  const Moments ma = moments_of(a), mb = moments_of(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double pooled_var = (ma.ss + mb.ss) / (na + nb - 2.0);

  EffectSizes out;
  if (pooled_var > 0) out.cohens_d = (ma.mean - mb.mean) / std::sqrt(pooled_var);

  long long gt = 0, lt = 0;
  for (double x : a)
    for (double y : b) {
      if (x > y) ++gt;
      else if (x < y) ++lt;
    }
  out.cliffs_delta = static_cast<double>(gt - lt) / (na * nb);
  return out;
}

EmbeddingReport pca(const std::vector<std::vector<double>>& matrix, int n_components) {
  const std::size_t n = matrix.size();
  if (n < 2) throw std::invalid_argument("pca needs at least 2 rows");
  const std::size_t d = matrix.front().size();
  if (d == 0) throw std::invalid_argument("pca needs at least one feature");
  for (const auto& row : matrix) {
    if (row.size() != d) throw std::invalid_argument("pca rows differ in length");
    check_finite(row, "matrix");
  }
  if (n_components < 1 || static_cast<std::size_t>(n_components) > std::min(n, d))
    throw std::invalid_argument("n_components out of range");

  std::vector<double> mean(d, 0.0);
  for (const auto& row : matrix)
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  for (double& m : mean) m /= static_cast<double>(n);

  // Sample covariance (n-1 convention).
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& row : matrix)
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p; q < d; ++q)
        cov[p][q] += (row[p] - mean[p]) * (row[q] - mean[q]);
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t q = p; q < d; ++q) {
      cov[p][q] /= static_cast<double>(n - 1);
      cov[q][p] = cov[p][q];
    }

  double total_var = 0;
  for (std::size_t p = 0; p < d; ++p) total_var += cov[p][p];
  if (total_var <= 0)
    throw std::invalid_argument("constant matrix has no principal components");

  // Cyclic Jacobi rotations on the covariance; V accumulates eigenvectors.
  std::vector<std::vector<double>> v(d, std::vector<double>(d, 0.0));
  for (std::size_t p = 0; p < d; ++p) v[p][p] = 1.0;
  auto off_norm = [&]() {
    double s = 0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) s += 2.0 * cov[p][q] * cov[p][q];
    return std::sqrt(s);
  };
  for (int sweep = 0; sweep < 100 && off_norm() >= 1e-12; ++sweep) {
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        if (cov[p][q] == 0) continue;
        const double tau = (cov[q][q] - cov[p][p]) / (2.0 * cov[p][q]);
        const double t = (tau >= 0 ? 1.0 : -1.0) /
                         (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t r = 0; r < d; ++r) {
          const double crp = cov[r][p], crq = cov[r][q];
          cov[r][p] = c * crp - s * crq;
          cov[r][q] = s * crp + c * crq;
        }
        for (std::size_t r = 0; r < d; ++r) {
          const double cpr = cov[p][r], cqr = cov[q][r];
          cov[p][r] = c * cpr - s * cqr;
          cov[q][r] = s * cpr + c * cqr;
        }
        for (std::size_t r = 0; r < d; ++r) {
          const double vrp = v[r][p], vrq = v[r][q];
          v[r][p] = c * vrp - s * vrq;
          v[r][q] = s * vrp + c * vrq;
        }
      }
    }
  }
  if (off_norm() >= 1e-12)
    throw numeric_error("jacobi eigendecomposition did not converge");

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return cov[a][a] > cov[b][b]; });

  EmbeddingReport report;
  const std::size_t nc = static_cast<std::size_t>(n_components);
  report.components.resize(nc, std::vector<double>(d));
  report.eigenvalues.resize(nc);
  report.explained_variance_ratio.resize(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    const std::size_t col = order[c];
    for (std::size_t j = 0; j < d; ++j) report.components[c][j] = v[j][col];
    // Sign convention: largest-magnitude entry positive.
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::fabs(report.components[c][j]) > std::fabs(report.components[c][arg]))
        arg = j;
    if (report.components[c][arg] < 0)
      for (double& e : report.components[c]) e = -e;
    report.eigenvalues[c] = cov[col][col];
    report.explained_variance_ratio[c] = cov[col][col] / total_var;
  }

  report.scores.resize(n, std::vector<double>(nc, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < nc; ++c) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j)
        dot += (matrix[i][j] - mean[j]) * report.components[c][j];
      report.scores[i][c] = dot;
    }
  return report;
}

KmeansResult kmeans(const std::vector<std::vector<double>>& matrix, int k,
                    std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  const std::size_t n = matrix.size();
  if (n < static_cast<std::size_t>(k))
    throw std::invalid_argument("k exceeds the number of rows");
  const std::size_t d = matrix.front().size();
  for (const auto& row : matrix) {
    if (row.size() != d) throw std::invalid_argument("kmeans rows differ in length");
    check_finite(row, "matrix");
  }

  Rng rng(derive_seed(seed, 1));
  // k-means++: each next centroid drawn with probability proportional to the
  // squared distance from the nearest already-chosen one.
  std::vector<std::vector<double>> centroids;
  centroids.reserve(static_cast<std::size_t>(k));
  centroids.push_back(matrix[rng.index(n)]);
  std::vector<double> d2(n);
  while (centroids.size() < static_cast<std::size_t>(k)) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, sq_dist(matrix[i], c));
      d2[i] = best;
      total += best;
    }
    if (total == 0) {
      centroids.push_back(matrix[rng.index(n)]);
      continue;
    }
    double target = rng.uniform01() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= d2[i];
      if (target <= 0) {
        pick = i;
        break;
      }
    }
    centroids.push_back(matrix[pick]);
  }

  KmeansResult result;
  result.labels.assign(n, 0);
  auto assign = [&]() {
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double dist = sq_dist(matrix[i], centroids[c]);
        if (dist < best) {
          best = dist;
          arg = c;
        }
      }
      result.labels[i] = arg;
      inertia += best;
    }
    return inertia;
  };

  for (int iter = 0; iter < 300; ++iter) {
    result.inertia = assign();
    result.inertia_history.push_back(result.inertia);
    result.iterations = iter + 1;

    std::vector<std::vector<double>> next(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) next[result.labels[i]][j] += matrix[i][j];
      ++counts[result.labels[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed an empty cluster from the point farthest from its centroid.
        std::size_t far = 0;
        double far_dist = -1;
        for (std::size_t i = 0; i < n; ++i) {
          const double dist = sq_dist(matrix[i], centroids[result.labels[i]]);
          if (dist > far_dist) {
            far_dist = dist;
            far = i;
          }
        }
        next[c] = matrix[far];
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) next[c][j] /= static_cast<double>(counts[c]);
    }

    double shift = 0;
    for (int c = 0; c < k; ++c) shift = std::max(shift, sq_dist(next[c], centroids[c]));
    centroids = std::move(next);
    if (std::sqrt(shift) < 1e-9) break;
  }
  result.inertia = assign();
  result.inertia_history.push_back(result.inertia);
  result.centroids = std::move(centroids);
  return result;
}

}  // namespace kneesight
