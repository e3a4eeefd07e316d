#pragma once

// Special functions backing the chi-squared filter and the paired t-test:
// regularized incomplete gamma (series + continued fraction), regularized
// incomplete beta (Lentz's continued fraction), and the distribution
// functions built on them.

#include <cmath>
#include <stdexcept>
#include <string>

namespace jttm {

namespace detail {

constexpr int kMaxIterations = 500;
constexpr double kEps = 1e-16;
constexpr double kFpMin = 1e-300;

// Lower regularized incomplete gamma P(a,x) by its power series,
// valid and fast for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < kMaxIterations; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Upper regularized incomplete gamma Q(a,x) by modified Lentz continued
// fraction, valid for x >= a + 1. Returns Q directly so tiny upper tails
// keep full precision.
inline double gamma_q_continued_fraction(double a, double x) {
  double b = x + 1.0 - a;
  double c = 1.0 / kFpMin;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= kMaxIterations; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = b + an / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 1000; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 3e-15) break;
  }
  return h;
}

}  // namespace detail

// Lower regularized incomplete gamma P(a, x).
inline double regularized_gamma_p(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("regularized_gamma_p: a must be positive");
  if (x < 0.0) throw std::invalid_argument("regularized_gamma_p: x must be nonnegative");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_continued_fraction(a, x);
}

// Upper regularized incomplete gamma Q(a, x) = 1 - P(a, x).
inline double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("regularized_gamma_q: a must be positive");
  if (x < 0.0) throw std::invalid_argument("regularized_gamma_q: x must be nonnegative");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_continued_fraction(a, x);
}

// Lower-tail chi-squared CDF with df degrees of freedom: P(df/2, t/2).
inline double chi2_cdf(int df, double t) {
  if (df < 1) throw std::invalid_argument("chi2_cdf: df must be a positive integer");
  if (t < 0.0) throw std::invalid_argument("chi2_cdf: t must be nonnegative");
  return regularized_gamma_p(0.5 * df, 0.5 * t);
}

// Upper-tail probability 1 - chi2_cdf(df, t), computed directly so values far
// below double epsilon are still meaningful.
inline double chi2_upper_tail(int df, double t) {
  if (df < 1) throw std::invalid_argument("chi2_upper_tail: df must be a positive integer");
  if (t < 0.0) throw std::invalid_argument("chi2_upper_tail: t must be nonnegative");
  return regularized_gamma_q(0.5 * df, 0.5 * t);
}

// Threshold t* with upper tail alpha: 1 - chi2_cdf(df, t*) = alpha.
// Bisection to |dt| < 1e-10.
inline double chi2_upper_quantile(int df, double alpha) {
  if (df < 1) throw std::invalid_argument("chi2_upper_quantile: df must be a positive integer");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("chi2_upper_quantile: alpha must lie in (0, 1)");
  }
  double hi = static_cast<double>(df) + 10.0;
  while (chi2_upper_tail(df, hi) >= alpha) {
    hi *= 2.0;
    if (hi > 1e9) break;
  }
  double lo = 0.0;
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;  // interval at double resolution
    if (chi2_upper_tail(df, mid) >= alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// Regularized incomplete beta I_x(a, b).
inline double regularized_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("regularized_beta: a, b must be positive");
  if (x < 0.0 || x > 1.0) throw std::invalid_argument("regularized_beta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                a * std::log(x) + b * std::log(1.0 - x));
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// Student-t CDF with df degrees of freedom.
inline double student_t_cdf(double t, int df) {
  if (df < 1) throw std::invalid_argument("student_t_cdf: df must be a positive integer");
  const double v = static_cast<double>(df);
  const double x = v / (v + t * t);
  const double half_tail = 0.5 * regularized_beta(0.5 * v, 0.5, x);
  return t >= 0.0 ? 1.0 - half_tail : half_tail;
}

}  // namespace jttm
