#pragma once

// Student-t distribution through the regularized incomplete beta function.

#include <cmath>
#include <limits>
#include <string>

#include "beamsight/error.hpp"

namespace beamsight {

namespace detail {

// Continued fraction for I_x(a, b), modified Lentz. Converges fast for x < (a+1)/(a+b+2).
inline long double beta_cf(long double a, long double b, long double x) {
  constexpr long double tiny = 1e-300L;
  constexpr long double eps = 1e-17L;
  constexpr int max_iter = 20000;
  const long double qab = a + b, qap = a + 1.0L, qam = a - 1.0L;
  long double c = 1.0L;
  long double d = 1.0L - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0L / d;
  long double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const long double m2 = 2.0L * m;
    long double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0L + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0L + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0L / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0L + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0L + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0L / d;
    const long double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0L) < eps) return h;
  }
  fail(ErrorKind::NonFinite, "incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b). `y` is 1 - x, passed separately so
/// callers can keep precision when x is close to 1.
inline double incomplete_beta(double a, double b, double x, double y) {
  if (!(a > 0) || !(b > 0)) fail(ErrorKind::InvalidConfig, "incomplete_beta needs a, b > 0");
  if (!(x >= 0 && x <= 1)) fail(ErrorKind::InvalidConfig, "incomplete_beta needs x in [0, 1]");
  if (x == 0) return 0.0;
  if (y == 0) return 1.0;
  const long double la = a, lb = b, lx = x, ly = y;
  const long double log_front = std::lgamma(la + lb) - std::lgamma(la) - std::lgamma(lb) +
                                la * std::log1p(-ly) + lb * std::log1p(-lx);
  const long double front = std::exp(log_front);
  if (lx < (la + 1.0L) / (la + lb + 2.0L)) return static_cast<double>(front * detail::beta_cf(la, lb, lx) / la);
  return static_cast<double>(1.0L - front * detail::beta_cf(lb, la, ly) / lb);
}

inline double incomplete_beta(double a, double b, double x) { return incomplete_beta(a, b, x, 1.0 - x); }

/// P(T <= t) for Student's t with `df` degrees of freedom.
inline double t_cdf(double t, double df) {
  if (!(df > 0) || !std::isfinite(df)) fail(ErrorKind::InvalidDf, "degrees of freedom must be positive, got " + std::to_string(df));
  if (std::isnan(t)) fail(ErrorKind::NonFinite, "t statistic is NaN");
  if (t == 0) return 0.5;
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double t2 = t * t;
  const double x = df / (df + t2);
  const double y = t2 / (df + t2);
  const double tail = 0.5 * incomplete_beta(df / 2.0, 0.5, x, y);
  return t > 0 ? 1.0 - tail : tail;
}

/// Two-sided p-value, 2 * (1 - t_cdf(|t|, df)).
inline double two_sided_p(double t, double df) {
  const double p = 2.0 * (1.0 - t_cdf(std::fabs(t), df));
  return p < 0.0 ? 0.0 : (p > 1.0 ? 1.0 : p);
}

}  // namespace beamsight
