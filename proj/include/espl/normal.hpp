#pragma once

#include <cmath>
#include <limits>

#include "espl/errors.hpp"

// Standard-normal utilities used by the rating math. The tail-safe pieces
// matter: naive pdf/cdf ratios turn into 0/0 well before the rating code
// stops caring about the result.

namespace espl {

inline constexpr double kInvSqrt2 = 0.7071067811865475244008443621048490;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599343819;
inline constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687637;

inline double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

// Complementary-error-function formulation: accurate in the lower tail where
// 1 - Phi(-x) would round to zero.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

namespace detail {

// Scaled complementary error function exp(x^2) * erfc(x), x >= 0.
// Below the switch point the direct product is exact enough; past it the
// divergent asymptotic series is summed to its smallest term.
inline double erfcx_pos(double x) {
  constexpr double kAsymptoticSwitch = 5.6568542494923806; // 8 / sqrt(2)
  if (x < kAsymptoticSwitch) return std::exp(x * x) * std::erfc(x);
  const double inv2x2 = 1.0 / (2.0 * x * x);
  double term = 1.0;
  double sum = 1.0;
  double sign = -1.0;
  for (int k = 1; k < 64; ++k) {
    term *= (2 * k - 1) * inv2x2;
    double next = sign * term;
    if (term < 1e-18 || !(term < 1.0)) break; // smallest-term cutoff
    sum += next;
    sign = -sign;
  }
  constexpr double kInvSqrtPi = 0.5641895835477562869480794515607726;
  return kInvSqrtPi / x * sum;
}

} // namespace detail

// Inverse Mills ratio phi(d) / Phi(d), finite for any finite d.
inline double inverse_mills(double d) {
  if (d >= -8.0) return norm_pdf(d) / norm_cdf(d);
  return kSqrt2OverPi / detail::erfcx_pos(-d * kInvSqrt2);
}

// Inverse standard-normal CDF: Acklam's rational approximation polished with
// one Halley step against the erfc-based CDF above.
inline double probit(double p) {
  if (!(p > 0.0) || !(p < 1.0))
    throw ConfigError("probit: p must lie strictly inside (0, 1)");

  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  double e = norm_cdf(x) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x -= u / (1.0 + 0.5 * x * u);
  return x;
}

} // namespace espl
