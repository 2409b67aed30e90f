#pragma once

// Scalar special functions backing the distribution layer: standard normal
// cdf/quantile, regularized incomplete beta and gamma, Student-t cdf/quantile.
// Everything here is deterministic double arithmetic with no global state.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace pebayes {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kLogTwoPi = 1.83787706640934548356;  // log(2*pi)
inline constexpr double kSqrtTwo = 1.41421356237309504880;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / kSqrtTwo); }

inline double normal_cdf_upper(double x) { return 0.5 * std::erfc(x / kSqrtTwo); }

inline double normal_log_pdf(double x) { return -0.5 * (x * x + kLogTwoPi); }

// log Phi(x).  erfc underflows near x = -37.5, so the deep left tail switches
// to the asymptotic expansion Phi(-a) ~ phi(a)/a * (1 - a^-2 + 3a^-4 - 15a^-6).
inline double log_normal_cdf(double x) {
  if (x > -37.0) return std::log(normal_cdf(x));
  const double r = 1.0 / (x * x);
  const double series = std::log1p(-r * (1.0 - r * (3.0 - 15.0 * r)));
  return -0.5 * x * x - 0.5 * kLogTwoPi - std::log(-x) + series;
}

// Inverse standard normal cdf, Wichura's PPND16 rational approximation
// (algorithm AS 241), accurate to ~1e-16 relative over the full double range.
inline double normal_quantile(double p) {
  if (!(p > 0.0) || !(p < 1.0))
    throw std::invalid_argument("normal_quantile: p must lie strictly in (0,1), got " +
                                std::to_string(p));
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.387132872796366608e0) /
           (((((((5.226495278852545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.871870074920579083e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
              3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
            4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
          (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
              6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
            2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
              2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
            5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
          (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
              1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
            5.99832206555887937690e-1) * r + 1.0);
  }
  return (q < 0.0) ? -val : val;
}

namespace detail {

// Continued fraction for the incomplete beta (Lentz's method).
inline double beta_cf(double a, double b, double x) {
  constexpr double eps = 3e-16;
  constexpr double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw std::runtime_error("inc_beta_reg: continued fraction did not converge");
}

inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 10000; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * 1e-16)
      return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
  }
  throw std::runtime_error("gamma_p: series did not converge");
}

inline double gamma_q_cf(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-16) return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
  }
  throw std::runtime_error("gamma_q: continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double inc_beta_reg(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0))
    throw std::invalid_argument("inc_beta_reg: shape parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - lbeta);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// Regularized lower incomplete gamma P(a, x); Q(a, x) = 1 - P(a, x).
inline double gamma_p(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("gamma_p: shape must be positive");
  if (x <= 0.0) return 0.0;
  return (x < a + 1.0) ? detail::gamma_p_series(a, x) : 1.0 - detail::gamma_q_cf(a, x);
}

inline double gamma_q(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("gamma_q: shape must be positive");
  if (x <= 0.0) return 1.0;
  return (x < a + 1.0) ? 1.0 - detail::gamma_p_series(a, x) : detail::gamma_q_cf(a, x);
}

// Student-t distribution with `dof` degrees of freedom, unit scale.
inline double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_cdf: dof must be positive");
  if (t == 0.0) return 0.5;
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * inc_beta_reg(0.5 * dof, 0.5, x);
  return (t > 0.0) ? 1.0 - tail : tail;
}

inline double student_t_log_pdf(double t, double dof) {
  return std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
         0.5 * std::log(dof * kPi) - 0.5 * (dof + 1.0) * std::log1p(t * t / dof);
}

// Inverse Student-t cdf by bracketed bisection on student_t_cdf.
inline double student_t_quantile(double p, double dof) {
  if (!(p > 0.0) || !(p < 1.0))
    throw std::invalid_argument("student_t_quantile: p must lie strictly in (0,1)");
  if (p == 0.5) return 0.0;
  double lo = -1.0, hi = 1.0;
  while (student_t_cdf(lo, dof) > p) lo *= 2.0;
  while (student_t_cdf(hi, dof) < p) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (student_t_cdf(mid, dof) < p ? lo : hi) = mid;
    if (hi - lo < 1e-14 * std::max(1.0, std::fabs(lo))) break;
  }
  return 0.5 * (lo + hi);
}

// Smallest x with Q(a, x) <= q, by bracketed bisection on gamma_q.  Used for
// inverse-cdf sampling deep in the tail of a truncated gamma.
inline double gamma_upper_quantile(double a, double q) {
  if (!(q > 0.0) || !(q < 1.0))
    throw std::invalid_argument("gamma_upper_quantile: q must lie strictly in (0,1)");
  double lo = 0.0, hi = std::max(4.0 * a, 8.0);
  while (gamma_q(a, hi) > q) {
    hi *= 2.0;
    if (hi > 1e300) throw std::runtime_error("gamma_upper_quantile: bracket expansion failed");
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (gamma_q(a, mid) > q ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace pebayes
