#pragma once

// Special functions backing p-value computation: regularised incomplete
// gamma (series + Lentz continued fraction) and regularised incomplete beta
// (continued fraction), accurate to well under 1e-10 absolute over the
// argument ranges used by the hypothesis tests.

namespace kneesight::special {

// Regularised lower incomplete gamma P(a, x), a > 0, x >= 0.
double reg_lower_gamma(double a, double x);

// Complement Q(a, x) = 1 - P(a, x), computed from whichever side is stable.
double reg_upper_gamma(double a, double x);

// Regularised incomplete beta I_x(a, b), a, b > 0, x in [0, 1].
double reg_inc_beta(double a, double b, double x);

// Standard normal CDF via erfc.
double normal_cdf(double z);

// Upper tail of the F distribution with (d1, d2) degrees of freedom.
double f_upper_tail(double f, double d1, double d2);

// Upper tail of the chi-square distribution with df degrees of freedom.
double chi2_upper_tail(double x, double df);

}  // namespace kneesight::special
