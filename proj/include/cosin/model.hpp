#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cosin/distributions.hpp"
#include "cosin/error.hpp"

namespace cosin {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CountGrid = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;
using FlagGrid = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;
using FlagVector = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1>;

// Largest count the link reports; exp overflow saturates here (2^53 - 1).
inline constexpr std::int64_t kMaxCount = (std::int64_t{1} << 53) - 1;

/// n x p count observations; mask(i, j) != 0 marks a held-out entry.
struct CountMatrix {
  CountGrid values;
  std::optional<FlagGrid> mask;

  Eigen::Index n() const { return values.rows(); }
  Eigen::Index p() const { return values.cols(); }
  bool masked(Eigen::Index i, Eigen::Index j) const { return mask && (*mask)(i, j) != 0; }

  std::size_t masked_count() const {
    if (!mask) return 0;
    std::size_t count = 0;
    for (Eigen::Index j = 0; j < mask->cols(); ++j)
      for (Eigen::Index i = 0; i < mask->rows(); ++i) count += (*mask)(i, j) != 0;
    return count;
  }
};

/// Cell covariates x (n x d), technical meta-covariates wT (p x qT) and
/// biological meta-covariates wB (p x qB).
struct Covariates {
  Matrix x;
  Matrix wT;
  Matrix wB;

  // Intercept-only covariates for every block.
  static Covariates intercepts(Eigen::Index n, Eigen::Index p) {
    return {Matrix::Ones(n, 1), Matrix::Ones(p, 1), Matrix::Ones(p, 1)};
  }
};

struct HyperParams {
  double alpha = 5.0;
  double sigma_beta2 = 1.0;
  double sigma_gamma2 = 1.0;
  double a_theta = 1.0;
  double b_theta = 1.0;
  double a_sigma = 1.0;
  double b_sigma = 1.0;
  double c_p = 0.5;
  int k_init = 0;  // 0: min(ceil(3 alpha), k_max)
  int k_max = 0;   // 0: min(n, p, 64)
  int iterations = 20000;
  int burn_in = 5000;
  int thin = 2;
  int adapt_start = 100;
  double adapt_c0 = -1.0;
  double adapt_c1 = -5e-4;
  std::uint64_t seed = 1;
  bool adapt = true;

  static HyperParams fast_profile() {
    HyperParams hp;
    hp.iterations = 4000;
    hp.burn_in = 1000;
    hp.thin = 2;
    return hp;
  }

  std::size_t retained_draws() const {
    return iterations > burn_in ? static_cast<std::size_t>((iterations - burn_in) / thin) : 0;
  }

  double adaptation_probability(int t) const { return std::exp(adapt_c0 + adapt_c1 * t); }

  // Fills k_init / k_max defaults for an n x p problem.
  HyperParams resolved(Eigen::Index n, Eigen::Index p) const {
    HyperParams out = *this;
    if (out.k_max <= 0) out.k_max = static_cast<int>(std::min<Eigen::Index>({n, p, 64}));
    if (out.k_init <= 0) out.k_init = std::min(static_cast<int>(std::ceil(3.0 * alpha)), out.k_max);
    return out;
  }
};

/// Latent interval of the rounded-exponential link: floor(exp(t)) = y for
/// every t in [lower, upper). lower is -inf for y = 0.
inline TruncInterval link_bounds(std::int64_t y) {
  if (y == 0) return {-kInf, 0.0};
  const double yd = static_cast<double>(y);
  return {std::log(yd), std::log(yd + 1.0)};
}

struct LinkValue {
  std::int64_t count = 0;
  bool saturated = false;
};

/// floor(exp(z)), consistent with link_bounds bit-for-bit at the interval
/// edges; saturates at kMaxCount.
inline LinkValue apply_link(double z) {
  if (z >= std::log(static_cast<double>(kMaxCount))) return {kMaxCount, true};
  if (z < 0.0) return {0, false};
  auto count = static_cast<std::int64_t>(std::floor(std::exp(z)));
  if (count > 0 && z < link_bounds(count).lower) --count;
  if (z >= link_bounds(count).upper) ++count;
  return {count, false};
}

struct ValidatedInputs {
  CountMatrix y;
  Covariates cov;
  HyperParams hp;  // resolved
  std::vector<std::string> warnings;
  double mask_fraction = 0.0;
};

namespace detail {

inline void check_finite(const Matrix& m, const char* name) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      if (!std::isfinite(m(i, j))) {
        std::ostringstream os;
        os << "non-finite value in " << name << " at (" << i << ", " << j << ")";
        throw ValidationError(os.str());
      }
}

inline void check_rows(const Matrix& m, Eigen::Index expected, const char* name, const char* dim) {
  if (m.rows() != expected) {
    std::ostringstream os;
    os << "dimension mismatch: " << name << " has " << m.rows() << " rows, expected " << expected << " (" << dim
       << ")";
    throw ValidationError(os.str());
  }
  if (m.cols() < 1) throw ValidationError(std::string("dimension mismatch: ") + name + " has no columns");
}

}  // namespace detail

inline void validate_hyperparams(const HyperParams& hp) {
  auto fail = [](const std::string& what) { throw ValidationError("invalid hyperparameter: " + what); };
  if (!(hp.alpha > 0)) fail("alpha must be positive");
  if (!(hp.sigma_beta2 > 0)) fail("sigma_beta2 must be positive");
  if (!(hp.sigma_gamma2 > 0)) fail("sigma_gamma2 must be positive");
  if (!(hp.a_theta > 0 && hp.b_theta > 0)) fail("a_theta, b_theta must be positive");
  if (!(hp.a_sigma > 0 && hp.b_sigma > 0)) fail("a_sigma, b_sigma must be positive");
  if (!(hp.c_p > 0 && hp.c_p < 1)) fail("c_p must lie in (0,1)");
  if (hp.k_init < 1 || hp.k_max < 1) fail("k_init and k_max must be positive");
  if (hp.k_init > hp.k_max) fail("k_init exceeds k_max");
  if (hp.iterations < 1) fail("iterations must be positive");
  if (hp.burn_in < 0 || hp.burn_in >= hp.iterations) fail("burn_in must satisfy 0 <= burn_in < iterations");
  if (hp.thin < 1) fail("thin must be positive");
  if (hp.adapt_start < 1) fail("adapt_start must be positive");
  if (hp.adapt_c1 > 0 || hp.adapt_c0 + hp.adapt_c1 * hp.adapt_start > 0)
    fail("adaptation probability exp(c0 + c1 t) must stay in (0,1] for t >= adapt_start");
}

/// Checks dimensions and domains; returns the bundle with resolved
/// hyperparameters, warnings, and the held-out fraction.
inline ValidatedInputs validate_inputs(const CountMatrix& y, const Covariates& cov, const HyperParams& hp) {
  const Eigen::Index n = y.n();
  const Eigen::Index p = y.p();
  if (n < 1 || p < 1) throw ValidationError("dimension mismatch: y must have at least one row and one column");
  if (y.mask && (y.mask->rows() != n || y.mask->cols() != p))
    throw ValidationError("dimension mismatch: mask must match y dimensions");
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      if (!y.masked(i, j) && y.values(i, j) < 0) {
        std::ostringstream os;
        os << "domain error: negative count in y at (" << i << ", " << j << ")";
        throw ValidationError(os.str());
      }
  detail::check_rows(cov.x, n, "x", "n cells");
  detail::check_rows(cov.wT, p, "wT", "p genes");
  detail::check_rows(cov.wB, p, "wB", "p genes");
  detail::check_finite(cov.x, "x");
  detail::check_finite(cov.wT, "wT");
  detail::check_finite(cov.wB, "wB");

  ValidatedInputs out{y, cov, hp.resolved(n, p), {}, 0.0};
  validate_hyperparams(out.hp);
  for (Eigen::Index c = 0; c < cov.wB.cols(); ++c) {
    if ((cov.wB.col(c).array() == cov.wB(0, c)).all()) {
      out.warnings.push_back("wB column " + std::to_string(c) +
                             " is constant: its logit coefficient is only identified as an intercept");
    }
  }
  out.mask_fraction = static_cast<double>(y.masked_count()) / static_cast<double>(n * p);
  return out;
}

/// All latent quantities of one Gibbs iteration. Column h of the
/// per-factor blocks (eta, lambda_tilde, lambda, phi, varphi, rho,
/// vartheta, v, u, gamma_b) always describes the same factor.
struct ChainState {
  Matrix z;             // n x p latent Gaussian
  Matrix beta;          // d x p
  Matrix gamma_t;       // d x qT
  Matrix eta;           // n x k
  Matrix lambda_tilde;  // p x k, unshrunk loadings
  Matrix lambda;        // p x k, phi * rho * lambda_tilde
  FlagGrid phi;         // p x k local scales
  FlagGrid varphi;      // p x k augmented logistic indicators
  FlagVector rho;       // k slab indicators
  Vector vartheta;      // k column scales
  Vector v;             // k stick fractions
  Vector u;             // k stick weights
  Matrix gamma_b;       // qB x k
  Vector sigma2;        // p idiosyncratic variances
  Matrix eps;           // n x p, z - x beta
  std::vector<int> xi;  // k, last sampled allocation (1-based as in the stick index)

  Eigen::Index k() const { return eta.cols(); }

  int active_count() const {
    int count = 0;
    for (Eigen::Index h = 0; h < rho.size(); ++h) count += rho(h) != 0;
    return count;
  }

  // Cumulative shrinkage probabilities pi_h = sum_{l <= h} u_l.
  Vector pi() const {
    Vector out(u.size());
    double acc = 0.0;
    for (Eigen::Index h = 0; h < u.size(); ++h) out(h) = acc += u(h);
    return out;
  }

  void refresh_lambda() {
    lambda = lambda_tilde;
    for (Eigen::Index h = 0; h < k(); ++h) {
      for (Eigen::Index j = 0; j < lambda.rows(); ++j) {
        if (rho(h) == 0 || phi(j, h) == 0) lambda(j, h) = 0.0;
      }
    }
  }
};

/// u_l = v_l prod_{m<l} (1 - v_m).
inline Vector stick_breaking(const Vector& v) {
  Vector u(v.size());
  double remaining = 1.0;
  for (Eigen::Index l = 0; l < v.size(); ++l) {
    u(l) = v(l) * remaining;
    remaining *= 1.0 - v(l);
  }
  return u;
}

/// Verifies the ChainState invariants; returns an empty string when valid.
inline std::string check_state_invariants(const ChainState& s, double tol = 1e-12) {
  const Eigen::Index k = s.k();
  if (s.lambda.cols() != k || s.lambda_tilde.cols() != k || s.phi.cols() != k || s.rho.size() != k ||
      s.vartheta.size() != k || s.v.size() != k || s.u.size() != k || s.gamma_b.cols() != k)
    return "per-factor blocks disagree on k";
  for (Eigen::Index h = 0; h < k; ++h)
    for (Eigen::Index j = 0; j < s.lambda.rows(); ++j) {
      const double expected = (s.rho(h) != 0 && s.phi(j, h) != 0) ? s.lambda_tilde(j, h) : 0.0;
      if (s.lambda(j, h) != expected) return "effective loading differs from phi * rho * lambda_tilde";
    }
  double prev = 0.0;
  for (Eigen::Index h = 0; h < k; ++h) {
    if (s.u(h) < 0) return "negative stick weight";
    const double next = prev + s.u(h);
    if (next < prev || next > 1.0 + tol) return "cumulative shrinkage probabilities not monotone in [0,1]";
    prev = next;
  }
  for (Eigen::Index j = 0; j < s.sigma2.size(); ++j)
    if (!(s.sigma2(j) > 0)) return "non-positive idiosyncratic variance";
  return {};
}

}  // namespace cosin
