#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "cosin/error.hpp"
#include "cosin/rng.hpp"

namespace cosin {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Interval (lower, upper) on the extended real line; lower < upper.
struct TruncInterval {
  double lower = -kInf;
  double upper = kInf;

  bool contains_strictly(double x) const { return x > lower && x < upper; }
};

// Standardized bound beyond which truncated-normal draws switch from the
// inverse CDF to exponential-proposal rejection.
inline constexpr double kTruncNormalTailSwitch = 3.0;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_log_cdf(double x) {
  if (x > -30.0) return std::log(normal_cdf(x));
  // Asymptotic expansion of the lower tail.
  const double x2 = x * x;
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) +
         std::log1p(-1.0 / x2 + 3.0 / (x2 * x2));
}

/// Inverse standard normal CDF (Wichura, AS 241), accurate to about 1e-16.
inline double normal_quantile(double p) {
  const double q = p - 0.5;
  double r, val;
  if (std::abs(q) <= 0.425) {
    r = 0.180625 - q * q;
    val = q *
          (((((((r * 2509.0809287301226727 + 33430.575583588128105) * r + 67265.770927008700853) * r +
               45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
            133.14166789178437745) * r + 3.387132872796366608) /
          (((((((r * 5226.495278852545925 + 28729.085735721942674) * r + 39307.89580009271061) * r +
               21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
            42.313330701600911252) * r + 1.0);
    return val;
  }
  r = q < 0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((r * 7.7454501427834140764e-4 + .0227238449892691845833) * r + .24178072517745061177) * r +
               1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
            4.6303378461565452959) * r + 1.42343711074968357734) /
          (((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r + .0151986665636164571966) * r +
               .14810397642748007459) * r + .68976733498510000455) * r + 1.6763848301838038494) * r +
            2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r + .0012426609473880784386) * r +
               .026532189526576123093) * r + .29656057182850489123) * r + 1.7848265399172913358) * r +
            5.4637849111641143699) * r + 6.6579046435011037772) /
          (((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
               7.868691311456132591e-4) * r + .0148753612908506148525) * r + .13692988092273580531) * r +
            .59983220655588793769) * r + 1.0);
  }
  return q < 0.0 ? -val : val;
}

namespace detail {

// Standard normal restricted to [a, b) with a >= kTruncNormalTailSwitch.
inline double truncated_normal_right_tail(double a, double b, RngStream& rng) {
  if (std::isfinite(b) && b * b - a * a < 2.0) {
    // Narrow interval: uniform proposal, acceptance >= exp(-1).
    while (true) {
      const double z = a + (b - a) * rng.uniform();
      if (rng.uniform() < std::exp(0.5 * (a * a - z * z))) return z;
    }
  }
  const double rate = 0.5 * (a + std::sqrt(a * a + 4.0));
  while (true) {
    const double z = a + rng.exponential() / rate;
    if (z >= b) continue;
    const double d = z - rate;
    if (rng.uniform() < std::exp(-0.5 * d * d)) return z;
  }
}

// Inverse-CDF draw on [a, b) for a <= 0 (keeps the CDF evaluations in the
// well-conditioned lower half).
inline double truncated_normal_inverse_cdf(double a, double b, RngStream& rng) {
  const double pa = normal_cdf(a);
  const double pb = normal_cdf(b);
  double u = pa + (pb - pa) * rng.uniform();
  u = std::clamp(u, std::numeric_limits<double>::min(), 1.0 - 0x1.0p-53);
  return normal_quantile(u);
}

inline double truncated_normal_standard(double a, double b, RngStream& rng) {
  if (a >= kTruncNormalTailSwitch) return truncated_normal_right_tail(a, b, rng);
  if (b <= -kTruncNormalTailSwitch) return -truncated_normal_right_tail(-b, -a, rng);
  if (a > 0.0) return -truncated_normal_inverse_cdf(-b, -a, rng);
  return truncated_normal_inverse_cdf(a, b, rng);
}

}  // namespace detail

/// Draw from N(mean, variance) restricted to `iv`; the result lies strictly
/// inside the interval.
inline double sample_truncated_normal(double mean, double variance, const TruncInterval& iv, RngStream& rng) {
  if (!(iv.lower < iv.upper)) throw NumericalError("empty truncation interval");
  const double sd = std::sqrt(variance);
  if (iv.lower == -kInf && iv.upper == kInf) return mean + sd * rng.normal();
  const double a = (iv.lower - mean) / sd;
  const double b = (iv.upper - mean) / sd;
  double x = mean + sd * detail::truncated_normal_standard(a, b, rng);
  if (x >= iv.upper) x = std::nextafter(iv.upper, -kInf);
  if (x <= iv.lower) x = std::nextafter(iv.lower, kInf);
  if (!(x < iv.upper)) x = 0.5 * (iv.lower + iv.upper);  // interval narrower than one ulp pair
  return x;
}

/// Gamma(shape, rate) via Marsaglia-Tsang; shape < 1 uses the power boost.
inline double sample_gamma(double shape, double rate, RngStream& rng) {
  if (shape < 1.0) {
    const double g = sample_gamma(shape + 1.0, 1.0, rng);
    const double x = g * std::exp(std::log(rng.uniform()) / shape);
    return std::max(x, std::numeric_limits<double>::denorm_min()) / rate;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v / rate;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v / rate;
  }
}

inline double sample_beta(double a, double b, RngStream& rng) {
  const double x = sample_gamma(a, 1.0, rng);
  const double y = sample_gamma(b, 1.0, rng);
  double r = x / (x + y);
  if (r <= 0.0) r = std::numeric_limits<double>::denorm_min();
  if (r >= 1.0) r = std::nextafter(1.0, 0.0);
  return r;
}

inline bool sample_bernoulli(double p, RngStream& rng) { return rng.uniform() < p; }

/// Index drawn with probability proportional to exp(log_weights[i]).
inline std::size_t sample_categorical_log(std::span<const double> log_weights, RngStream& rng) {
  const double top = *std::max_element(log_weights.begin(), log_weights.end());
  double total = 0.0;
  for (double lw : log_weights) total += std::exp(lw - top);
  double target = rng.uniform() * total;
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    target -= std::exp(log_weights[i] - top);
    if (target <= 0.0) return i;
  }
  return log_weights.size() - 1;
}

namespace detail {

inline constexpr double kPgTrunc = 0.64;

// Coefficients of the alternating-series representation of J*(1, z).
inline double pg_series_coef(int n, double x) {
  const double k = (n + 0.5) * std::numbers::pi;
  if (x > kPgTrunc) return k * std::exp(-0.5 * k * k * x);
  if (x <= 0.0) return 0.0;
  const double expnt =
      -1.5 * (std::log(0.5 * std::numbers::pi) + std::log(x)) + std::log(k) - 2.0 * (n + 0.5) * (n + 0.5) / x;
  return std::exp(expnt);
}

inline double pg_mass_texpon(double z) {
  const double t = kPgTrunc;
  const double fz = 0.125 * std::numbers::pi * std::numbers::pi + 0.5 * z * z;
  const double b = std::sqrt(1.0 / t) * (t * z - 1.0);
  const double a = -std::sqrt(1.0 / t) * (t * z + 1.0);
  const double x0 = std::log(fz) + fz * t;
  const double xb = x0 - z + normal_log_cdf(b);
  const double xa = x0 + z + normal_log_cdf(a);
  const double qdivp = 4.0 / std::numbers::pi * (std::exp(xb) + std::exp(xa));
  return 1.0 / (1.0 + qdivp);
}

// Inverse Gaussian IG(1/z, 1) truncated to (0, kPgTrunc).
inline double pg_truncated_inverse_gaussian(double z, RngStream& rng) {
  z = std::abs(z);
  const double t = kPgTrunc;
  double x = t + 1.0;
  if (1.0 / t > z) {
    double alpha = 0.0;
    while (rng.uniform() > alpha) {
      double e1 = rng.exponential();
      double e2 = rng.exponential();
      while (e1 * e1 > 2.0 * e2 / t) {
        e1 = rng.exponential();
        e2 = rng.exponential();
      }
      x = 1.0 + e1 * t;
      x = t / (x * x);
      alpha = std::exp(-0.5 * z * z * x);
    }
  } else {
    const double mu = 1.0 / z;
    while (x > t) {
      double y = rng.normal();
      y *= y;
      const double half_mu = 0.5 * mu;
      const double mu_y = mu * y;
      x = mu + half_mu * mu_y - half_mu * std::sqrt(4.0 * mu_y + mu_y * mu_y);
      if (rng.uniform() > mu / (mu + x)) x = mu * mu / x;
    }
  }
  return x;
}

}  // namespace detail

/// Exact draw from the Polya-Gamma PG(1, c) distribution using Devroye's
/// alternating-series acceptance scheme (PG(1, c) = J*(1, c/2) / 4).
inline double sample_polya_gamma(double c, RngStream& rng) {
  const double z = 0.5 * std::abs(c);
  const double fz = 0.125 * std::numbers::pi * std::numbers::pi + 0.5 * z * z;
  const double mass = detail::pg_mass_texpon(z);
  while (true) {
    double x;
    if (rng.uniform() < mass) {
      x = detail::kPgTrunc + rng.exponential() / fz;
    } else {
      x = detail::pg_truncated_inverse_gaussian(z, rng);
    }
    double s = detail::pg_series_coef(0, x);
    const double y = rng.uniform() * s;
    for (int n = 1;; ++n) {
      if (n % 2 == 1) {
        s -= detail::pg_series_coef(n, x);
        if (y <= s) return 0.25 * x;
      } else {
        s += detail::pg_series_coef(n, x);
        if (y > s) break;
      }
    }
  }
}

/// Draw from N(P^-1 b, P^-1) using one Cholesky factorization of P.
/// Throws NumericalError carrying the dimension when P is not positive definite.
inline Eigen::VectorXd sample_mvn_precision(const Eigen::VectorXd& b, const Eigen::MatrixXd& precision,
                                            RngStream& rng) {
  const Eigen::Index dim = precision.rows();
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("precision matrix of dimension " + std::to_string(dim) + " is not positive definite", dim);
  }
  Eigen::VectorXd mean = llt.solve(b);
  Eigen::VectorXd noise(dim);
  for (Eigen::Index i = 0; i < dim; ++i) noise(i) = rng.normal();
  // L^T x = noise gives x ~ N(0, P^-1).
  llt.matrixU().solveInPlace(noise);
  return mean + noise;
}

}  // namespace cosin
