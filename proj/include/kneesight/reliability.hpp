#pragma once

// Population lifetime analysis: Kaplan-Meier estimator, Weibull and
// lognormal maximum-likelihood fits, survival/hazard/median queries.

#include <cstddef>
#include <vector>

namespace kneesight {

struct LifetimeObservation {
  double eol = 0;         // cycles, > 0
  bool censored = false;  // right-censored (still alive at eol)
};

struct LifetimeSample {
  std::vector<LifetimeObservation> values;  // non-empty
};

enum class LifetimeFamily { weibull, lognormal };

struct LifetimeFit {
  LifetimeFamily family = LifetimeFamily::weibull;
  // Weibull S(t) = exp(-(t/lambda)^k); location pinned to 0.
  double weibull_shape = 0;  // k
  double weibull_scale = 0;  // lambda
  // Lognormal: s = MLE std of ln x (divide by n), scale = exp(mean ln x).
  double lognorm_s = 0;
  double lognorm_scale = 0;
  double loglik = 0;
  std::size_t n = 0;
};

struct KaplanMeierStep {
  double t;         // event time (cycles)
  double survival;  // S(t) just after the event
};

struct KaplanMeierCurve {
  std::vector<KaplanMeierStep> steps;  // survival non-increasing, in [0, 1]
};

// Product-limit estimator over distinct event times; censored observations
// shrink risk sets without producing steps.
KaplanMeierCurve kaplan_meier(const LifetimeSample& sample);

// Complete-data MLE. Weibull shape solved by Newton iteration on the profile
// score (tolerance 1e-10, <= 100 iterations, bisection fallback); requires
// n >= 3 uncensored observations with nonzero spread.
LifetimeFit fit_lifetime(LifetimeFamily family, const LifetimeSample& sample);

double survival(const LifetimeFit& fit, double t);         // S(t), t >= 0
double hazard(const LifetimeFit& fit, double t);           // h(t) = f(t)/S(t), t > 0
double density(const LifetimeFit& fit, double t);          // f(t), t > 0
double median_lifetime(const LifetimeFit& fit);

struct PopulationSummary {
  std::size_t n;
  double mean;
  double stddev;  // sample std (n-1)
};

PopulationSummary population_summary(const LifetimeSample& sample);

}  // namespace kneesight
