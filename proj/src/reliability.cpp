#include "kneesight/reliability.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "kneesight/common.hpp"
#include "kneesight/special.hpp"

namespace kneesight {

namespace {

void validate_sample(const LifetimeSample& sample) {
  if (sample.values.empty()) throw std::invalid_argument("lifetime sample is empty");
  for (const auto& v : sample.values)
    if (!(v.eol > 0) || !std::isfinite(v.eol))
      throw std::invalid_argument("lifetime observations must be finite and > 0");
}

std::vector<double> uncensored_values(const LifetimeSample& sample) {
  std::vector<double> x;
  x.reserve(sample.values.size());
  for (const auto& v : sample.values) {
    if (v.censored)
      throw std::invalid_argument("parametric MLE requires complete (uncensored) data");
    x.push_back(v.eol);
  }
  return x;
}

// Profile score for the Weibull shape: g(k) = sum x^k ln x / sum x^k
// - mean(ln x) - 1/k. Strictly increasing in k with a unique root.
// Values are pre-scaled by their maximum (the score is scale-invariant),
// which keeps x^k finite for large k.
struct WeibullScore {
  std::vector<double> x;  // scaled to max 1
  double mean_log = 0;

  explicit WeibullScore(std::vector<double> values) : x(std::move(values)) {
    double mx = *std::max_element(x.begin(), x.end());
    for (auto& v : x) v /= mx;
    for (double v : x) mean_log += std::log(v);
    mean_log /= static_cast<double>(x.size());
  }

  double operator()(double k) const {
    double a = 0, b = 0;
    for (double v : x) {
      double p = std::pow(v, k);
      a += p * std::log(v);
      b += p;
    }
    return a / b - mean_log - 1.0 / k;
  }

  double derivative(double k) const {
    double a = 0, b = 0, a2 = 0;
    for (double v : x) {
      double lv = std::log(v);
      double p = std::pow(v, k);
      a += p * lv;
      b += p;
      a2 += p * lv * lv;
    }
    return (a2 * b - a * a) / (b * b) + 1.0 / (k * k);
  }
};

double solve_weibull_shape(const WeibullScore& score) {
  const double lo_bound = 1e-4, hi_bound = 1e4;
  double k = 1.0;
  for (int iter = 0; iter < 100; ++iter) {
    double g = score(k);
    if (std::abs(g) < 1e-10) return k;
    double next = k - g / score.derivative(k);
    if (!(next > lo_bound && next < hi_bound) || !std::isfinite(next)) break;
    if (std::abs(next - k) < 1e-10 * std::max(1.0, k)) return next;
    k = next;
  }
  // Newton left the trust region or stalled: bisection on the monotone score.
  double lo = lo_bound, hi = hi_bound;
  if (score(lo) > 0 || score(hi) < 0)
    throw numeric_error("weibull shape root not bracketed in (1e-4, 1e4)");
  for (int iter = 0; iter < 200; ++iter) {
    double mid = 0.5 * (lo + hi);
    if (hi - lo < 1e-12 * std::max(1.0, mid)) return mid;
    (score(mid) < 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // ln sqrt(2*pi)

}  // namespace

KaplanMeierCurve kaplan_meier(const LifetimeSample& sample) {
  validate_sample(sample);
  std::vector<LifetimeObservation> obs(sample.values);
  std::sort(obs.begin(), obs.end(),
            [](const LifetimeObservation& a, const LifetimeObservation& b) {
              return a.eol < b.eol;
            });
  KaplanMeierCurve curve;
  double survival = 1.0;
  std::size_t n = obs.size();
  // While no censored observation has left the risk set, the product
  // telescopes: S = prod (r_i - d_i)/r_i with r_{i+1} = r_i - d_i, so
  // S = 1 - (cumulative events)/n exactly. Evaluating it in that closed
  // form avoids accumulating one rounding error per step; the running
  // product only starts once censoring breaks the telescope.
  bool censoring_seen = false;
  std::size_t events_total = 0;
  std::size_t i = 0;
  while (i < n) {
    double t = obs[i].eol;
    std::size_t at_risk = n - i;  // everyone with eol >= t, censored included
    std::size_t events = 0;
    bool censored_here = false;
    std::size_t j = i;
    while (j < n && obs[j].eol == t) {
      if (!obs[j].censored)
        ++events;
      else
        censored_here = true;
      ++j;
    }
    if (events > 0) {
      events_total += events;
      if (!censoring_seen)
        survival = 1.0 - static_cast<double>(events_total) / static_cast<double>(n);
      else
        survival *= 1.0 - static_cast<double>(events) / static_cast<double>(at_risk);
      curve.steps.push_back({t, survival});
    }
    // Censored observations tied at t stay in the risk set for t itself and
    // only break the telescope for later event times.
    censoring_seen = censoring_seen || censored_here;
    i = j;
  }
  return curve;
}

LifetimeFit fit_lifetime(LifetimeFamily family, const LifetimeSample& sample) {
  validate_sample(sample);
  std::vector<double> x = uncensored_values(sample);
  std::size_t n = x.size();
  if (n < 3) throw std::invalid_argument("parametric fit requires n >= 3");
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); }))
    throw std::invalid_argument("degenerate sample: all observations equal");

  LifetimeFit fit;
  fit.family = family;
  fit.n = n;

  if (family == LifetimeFamily::weibull) {
    WeibullScore score(x);
    double k = solve_weibull_shape(score);
    // lambda on the original scale: (mean of x^k)^(1/k).
    double mx = *std::max_element(x.begin(), x.end());
    double sum = 0;
    for (double v : x) sum += std::pow(v / mx, k);
    double lambda = mx * std::pow(sum / static_cast<double>(n), 1.0 / k);
    fit.weibull_shape = k;
    fit.weibull_scale = lambda;
    double ll = 0;
    for (double v : x)
      ll += std::log(k) - k * std::log(lambda) + (k - 1.0) * std::log(v) -
            std::pow(v / lambda, k);
    fit.loglik = ll;
  } else {
    double mu = 0;
    for (double v : x) mu += std::log(v);
    mu /= static_cast<double>(n);
    double s2 = 0;
    for (double v : x) s2 += (std::log(v) - mu) * (std::log(v) - mu);
    s2 /= static_cast<double>(n);  // MLE convention
    double s = std::sqrt(s2);
    fit.lognorm_s = s;
    fit.lognorm_scale = std::exp(mu);
    double ll = 0;
    for (double v : x)
      ll += -std::log(v) - std::log(s) - kLogSqrt2Pi -
            (std::log(v) - mu) * (std::log(v) - mu) / (2.0 * s2);
    fit.loglik = ll;
  }
  return fit;
}

double survival(const LifetimeFit& fit, double t) {
  if (!(t >= 0)) throw std::invalid_argument("survival requires t >= 0");
  if (fit.family == LifetimeFamily::weibull)
    return std::exp(-std::pow(t / fit.weibull_scale, fit.weibull_shape));
  if (t == 0) return 1.0;
  double z = (std::log(t) - std::log(fit.lognorm_scale)) / fit.lognorm_s;
  return 1.0 - special::normal_cdf(z);
}

double density(const LifetimeFit& fit, double t) {
  if (!(t > 0)) throw std::invalid_argument("density requires t > 0");
  if (fit.family == LifetimeFamily::weibull) {
    double k = fit.weibull_shape, lambda = fit.weibull_scale;
    return (k / lambda) * std::pow(t / lambda, k - 1.0) *
           std::exp(-std::pow(t / lambda, k));
  }
  double s = fit.lognorm_s;
  double z = (std::log(t) - std::log(fit.lognorm_scale)) / s;
  return std::exp(-0.5 * z * z) / (t * s * std::sqrt(2.0 * std::numbers::pi));
}

double hazard(const LifetimeFit& fit, double t) {
  if (!(t > 0)) throw std::invalid_argument("hazard requires t > 0");
  if (fit.family == LifetimeFamily::weibull) {
    double k = fit.weibull_shape, lambda = fit.weibull_scale;
    return (k / lambda) * std::pow(t / lambda, k - 1.0);
  }
  return density(fit, t) / survival(fit, t);
}

double median_lifetime(const LifetimeFit& fit) {
  if (fit.family == LifetimeFamily::weibull)
    return fit.weibull_scale * std::pow(std::numbers::ln2, 1.0 / fit.weibull_shape);
  return fit.lognorm_scale;
}

PopulationSummary population_summary(const LifetimeSample& sample) {
  validate_sample(sample);
  std::size_t n = sample.values.size();
  double mean = 0;
  for (const auto& v : sample.values) mean += v.eol;
  mean /= static_cast<double>(n);
  double ss = 0;
  for (const auto& v : sample.values) ss += (v.eol - mean) * (v.eol - mean);
  double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  return {n, mean, sd};
}

}  // namespace kneesight
