#pragma once

// Correlation measures with bootstrap confidence intervals, group hypothesis
// tests, effect sizes, PCA, and k-means for population heterogeneity
// analysis.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kneesight {

enum class CorrelationMethod { pearson, spearman };

std::string to_string(CorrelationMethod m);
CorrelationMethod correlation_method_from_string(const std::string& name);

struct CorrelationReport {
  CorrelationMethod method = CorrelationMethod::pearson;
  double estimate = 0;
  int n = 0;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  int bootstrap_b = 0;
  std::uint64_t seed = 0;
  int degenerate_resamples = 0;  // zero-variance resamples skipped
};

// Pearson (population-covariance convention; the ratio is convention-free)
// or Spearman (Pearson on average ranks, ties get the mean rank). Requires
// n >= 3, finite inputs, and nonzero variance on both sides.
CorrelationReport correlation(std::span<const double> x, std::span<const double> y,
                              CorrelationMethod method);

// Paired nonparametric bootstrap with a percentile interval. Resamples are
// drawn from per-resample RNG streams derived from (seed, resample index),
// so results do not depend on evaluation order. Zero-variance resamples are
// skipped and counted; more than 50% skipped is an error.
CorrelationReport bootstrap_ci(std::span<const double> x, std::span<const double> y,
                               CorrelationMethod method, int b = 2000,
                               double level = 0.95, std::uint64_t seed = 0);

enum class GroupTest { anova_f, kruskal_wallis };

std::string to_string(GroupTest t);
GroupTest group_test_from_string(const std::string& name);

struct GroupTestReport {
  GroupTest test = GroupTest::anova_f;
  double statistic = 0;
  double p_value = 1;
  std::vector<std::size_t> group_sizes;
  // anova_f: {k-1, N-k}; kruskal_wallis: {k-1}.
  std::vector<double> df;
};

// One-way ANOVA F (p from the F upper tail) or Kruskal-Wallis H with tie
// correction (p from the chi-square upper tail). Requires >= 2 groups with
// >= 2 observations each.
GroupTestReport group_test(const std::vector<std::vector<double>>& groups,
                           GroupTest test);

struct EffectSizes {
  // Absent when the pooled standard deviation is zero (both groups
  // constant); Cliff's delta is defined regardless.
  std::optional<double> cohens_d;
  double cliffs_delta = 0;
};

// Cohen's d with the pooled (n-1) standard deviation and the exact pairwise
// Cliff's delta. Each group needs >= 2 observations.
EffectSizes effect_sizes(std::span<const double> a, std::span<const double> b);

struct EmbeddingReport {
  std::vector<std::vector<double>> components;   // n_components x d, orthonormal
  std::vector<double> eigenvalues;               // descending, kept components
  std::vector<double> explained_variance_ratio;  // against total variance
  std::vector<std::vector<double>> scores;       // n x n_components
  // Filled by the clustering stage when PCA and k-means run as a pipeline.
  std::vector<int> cluster_labels;
  std::vector<std::vector<double>> centroids;
};

// Column-centred PCA via cyclic Jacobi eigendecomposition of the sample
// covariance (n-1 convention). Components are sorted by eigenvalue
// descending; each component's largest-magnitude entry is made positive.
EmbeddingReport pca(const std::vector<std::vector<double>>& matrix, int n_components);

struct KmeansResult {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  double inertia = 0;
  int iterations = 0;
  std::vector<double> inertia_history;  // per Lloyd iteration, non-increasing
};

// k-means++ seeding followed by Lloyd iterations until the largest centroid
// shift drops below 1e-9 or 300 iterations. Deterministic given the seed;
// empty clusters are re-seeded from the farthest point.
KmeansResult kmeans(const std::vector<std::vector<double>>& matrix, int k,
                    std::uint64_t seed);

}  // namespace kneesight
