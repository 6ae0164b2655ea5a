#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cosin/distributions.hpp"
#include "cosin/error.hpp"
#include "cosin/model.hpp"
#include "cosin/parallel.hpp"
#include "cosin/rng.hpp"

namespace cosin {

// Stream tags; one logical stream per (step, iteration, unit).
enum class Step : std::uint64_t {
  kInit = 1,
  kZ,
  kGammaT,
  kBeta,
  kEta,
  kSigma,
  kLocalAug,
  kPolyaGamma,
  kLambda,
  kRhoTheta,
  kPhi,
  kAdapt,
};

inline constexpr double kJitterScale = 1e-8;

/// Gaussian N(P^-1 b, P^-1) sharing one factorization across draws. On
/// failure adds kJitterScale * mean(diag P) to the diagonal and retries once.
class GaussianPrecision {
 public:
  explicit GaussianPrecision(const Matrix& precision) : llt_(precision) {
    if (llt_.info() != Eigen::Success) {
      Matrix jittered = precision;
      jittered.diagonal().array() += kJitterScale * precision.diagonal().mean();
      llt_.compute(jittered);
      jittered_ = true;
      if (llt_.info() != Eigen::Success) {
        throw NumericalError("precision matrix of dimension " + std::to_string(precision.rows()) +
                                 " is not positive definite after jitter",
                             precision.rows());
      }
    }
  }

  bool jittered() const { return jittered_; }

  Vector mean(const Vector& b) const { return llt_.solve(b); }

  // Adds a N(0, P^-1) perturbation to `mean`.
  Vector draw_around(Vector mean, RngStream& rng) const {
    Vector noise(mean.size());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = rng.normal();
    llt_.matrixU().solveInPlace(noise);
    return mean + noise;
  }

  Vector draw(const Vector& b, RngStream& rng) const { return draw_around(mean(b), rng); }

 private:
  Eigen::LLT<Matrix> llt_;
  bool jittered_ = false;
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Immutable inputs plus per-chain precomputations shared by every step.
class GibbsContext {
 public:
  GibbsContext(const ValidatedInputs& in, std::size_t workers = 1)
      : y_(in.y), cov_(in.cov), hp_(in.hp), streams_(in.hp.seed), workers_(workers) {
    xtx_ = cov_.x.transpose() * cov_.x;
    wtw_ = cov_.wT.transpose() * cov_.wT;
    refresh_bounds();
  }

  const CountMatrix& y() const { return y_; }
  const Covariates& cov() const { return cov_; }
  const HyperParams& hp() const { return hp_; }
  const StreamFactory& streams() const { return streams_; }
  std::size_t workers() const { return workers_; }
  const Matrix& xtx() const { return xtx_; }
  const Matrix& wtw() const { return wtw_; }
  Eigen::Index n() const { return y_.n(); }
  Eigen::Index p() const { return y_.p(); }

  bool masked(Eigen::Index i, Eigen::Index j) const { return y_.masked(i, j); }
  const TruncInterval& bounds(Eigen::Index i, Eigen::Index j) const {
    return bounds_[static_cast<std::size_t>(j * n() + i)];
  }

  RngStream stream(Step step, std::uint64_t iteration, std::uint64_t unit = 0) const {
    return streams_.stream(static_cast<std::uint64_t>(step), iteration, unit);
  }

  // Replaces the observed counts (same shape and mask).
  void set_counts(const CountGrid& values) {
    y_.values = values;
    refresh_bounds();
  }

 private:
  void refresh_bounds() {
    bounds_.assign(static_cast<std::size_t>(n() * p()), TruncInterval{});
    for (Eigen::Index j = 0; j < p(); ++j)
      for (Eigen::Index i = 0; i < n(); ++i)
        if (!masked(i, j)) bounds_[static_cast<std::size_t>(j * n() + i)] = link_bounds(y_.values(i, j));
  }

  CountMatrix y_;
  Covariates cov_;
  HyperParams hp_;
  StreamFactory streams_;
  std::size_t workers_;
  Matrix xtx_;
  Matrix wtw_;
  std::vector<TruncInterval> bounds_;
};

namespace detail {

inline Vector inverse(const Vector& v) { return v.array().inverse().matrix(); }

// Draws every per-factor quantity of column h from its prior; rho_h = active.
inline void draw_column_from_prior(ChainState& s, const GibbsContext& ctx, Eigen::Index h, bool active,
                                   RngStream& rng) {
  const HyperParams& hp = ctx.hp();
  for (Eigen::Index i = 0; i < s.eta.rows(); ++i) s.eta(i, h) = rng.normal();
  s.vartheta(h) = 1.0 / sample_gamma(hp.a_theta, hp.b_theta, rng);
  const double sd = std::sqrt(s.vartheta(h));
  for (Eigen::Index j = 0; j < s.lambda_tilde.rows(); ++j) s.lambda_tilde(j, h) = sd * rng.normal();
  const double sg = std::sqrt(hp.sigma_gamma2);
  for (Eigen::Index c = 0; c < s.gamma_b.rows(); ++c) s.gamma_b(c, h) = sg * rng.normal();
  const Vector lp = ctx.cov().wB * s.gamma_b.col(h);
  for (Eigen::Index j = 0; j < s.phi.rows(); ++j) {
    const double q = logistic(lp(j));
    const bool vp = sample_bernoulli(q, rng);
    const bool tilde = sample_bernoulli(hp.c_p, rng);
    s.varphi(j, h) = vp;
    s.phi(j, h) = vp && tilde;
  }
  s.rho(h) = active;
  s.v(h) = sample_beta(1.0, hp.alpha, rng);
}

}  // namespace detail

/// Initial chain state: z at the log-scale midpoint of each link interval
/// (-1 for zero counts, column mean of observed starts for held-out
/// entries); remaining blocks from their priors with the first k_init
/// columns active and sigma_j^2 = 1.
inline ChainState init_state(const GibbsContext& ctx) {
  const HyperParams& hp = ctx.hp();
  const Eigen::Index n = ctx.n(), p = ctx.p();
  const Eigen::Index d = ctx.cov().x.cols(), qt = ctx.cov().wT.cols(), qb = ctx.cov().wB.cols();
  const Eigen::Index k = hp.k_init;
  RngStream rng = ctx.stream(Step::kInit, 0);

  ChainState s;
  s.z.resize(n, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double sum = 0.0;
    Eigen::Index observed = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (ctx.masked(i, j)) continue;
      const std::int64_t y = ctx.y().values(i, j);
      s.z(i, j) = y == 0 ? -1.0 : std::log(static_cast<double>(y) + 0.5);
      sum += s.z(i, j);
      ++observed;
    }
    const double fill = observed > 0 ? sum / static_cast<double>(observed) : 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (ctx.masked(i, j)) s.z(i, j) = fill;
  }

  s.gamma_t.resize(d, qt);
  for (Eigen::Index c = 0; c < qt; ++c)
    for (Eigen::Index l = 0; l < d; ++l) s.gamma_t(l, c) = rng.normal();
  s.beta.resize(d, p);
  const double sb = std::sqrt(hp.sigma_beta2);
  const Matrix prior_mean = s.gamma_t * ctx.cov().wT.transpose();
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index l = 0; l < d; ++l) s.beta(l, j) = prior_mean(l, j) + sb * rng.normal();

  s.eta.resize(n, k);
  s.lambda_tilde.resize(p, k);
  s.phi.resize(p, k);
  s.varphi.resize(p, k);
  s.rho.resize(k);
  s.vartheta.resize(k);
  s.v.resize(k);
  s.gamma_b.resize(qb, k);
  for (Eigen::Index h = 0; h < k; ++h) detail::draw_column_from_prior(s, ctx, h, true, rng);
  s.v(k - 1) = 1.0;
  s.u = stick_breaking(s.v);
  s.sigma2 = Vector::Ones(p);
  s.xi.assign(static_cast<std::size_t>(k), 0);
  s.refresh_lambda();
  s.eps = s.z - ctx.cov().x * s.beta;
  return s;
}

/// Step i: z_ij from N(x_i'beta_j + eta_i'lambda_j, sigma_j^2) truncated to
/// the link interval of y_ij; held-out entries are drawn untruncated.
inline void update_z(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const Matrix mean = ctx.cov().x * s.beta + s.eta * s.lambda.transpose();
  parallel_for(static_cast<std::size_t>(ctx.p()), ctx.workers(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    RngStream rng = ctx.stream(Step::kZ, t, jj);
    const double var = s.sigma2(j);
    const double sd = std::sqrt(var);
    for (Eigen::Index i = 0; i < ctx.n(); ++i) {
      if (ctx.masked(i, j)) {
        s.z(i, j) = mean(i, j) + sd * rng.normal();
      } else {
        s.z(i, j) = sample_truncated_normal(mean(i, j), var, ctx.bounds(i, j), rng);
      }
    }
  });
}

/// Step ii: rows of Gamma_T given beta.
inline void update_gamma_t(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const double prec_b = 1.0 / ctx.hp().sigma_beta2;
  const Eigen::Index qt = ctx.cov().wT.cols();
  const GaussianPrecision post(Matrix::Identity(qt, qt) + prec_b * ctx.wtw());
  const Matrix rhs = prec_b * (ctx.cov().wT.transpose() * s.beta.transpose());  // qT x d
  parallel_for(static_cast<std::size_t>(s.beta.rows()), ctx.workers(), [&](std::size_t ll) {
    const auto l = static_cast<Eigen::Index>(ll);
    RngStream rng = ctx.stream(Step::kGammaT, t, ll);
    s.gamma_t.row(l) = post.draw(rhs.col(l), rng).transpose();
  });
}

/// Step iii: beta_j given z, eta, Lambda, Gamma_T; refreshes eps = z - x beta.
inline void update_beta(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const Eigen::Index d = ctx.cov().x.cols();
  const double prec_b = 1.0 / ctx.hp().sigma_beta2;
  const Matrix xt_resid = ctx.cov().x.transpose() * (s.z - s.eta * s.lambda.transpose());  // d x p
  const Matrix prior_mean = s.gamma_t * ctx.cov().wT.transpose();                            // d x p
  parallel_for(static_cast<std::size_t>(ctx.p()), ctx.workers(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    RngStream rng = ctx.stream(Step::kBeta, t, jj);
    const double prec_j = 1.0 / s.sigma2(j);
    const Matrix precision = prec_b * Matrix::Identity(d, d) + prec_j * ctx.xtx();
    const Vector b = prec_j * xt_resid.col(j) + prec_b * prior_mean.col(j);
    s.beta.col(j) = GaussianPrecision(precision).draw(b, rng);
  });
  s.eps = s.z - ctx.cov().x * s.beta;
}

/// Step iv: factor scores eta_i given Lambda, Sigma and eps.
inline void update_eta(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const Eigen::Index k = s.k();
  const Vector inv_s2 = detail::inverse(s.sigma2);
  const Matrix scaled = inv_s2.asDiagonal() * s.lambda;  // Sigma^-1 Lambda, p x k
  const GaussianPrecision post(Matrix::Identity(k, k) + s.lambda.transpose() * scaled);
  const Matrix rhs = scaled.transpose() * s.eps.transpose();  // k x n
  parallel_for(static_cast<std::size_t>(ctx.n()), ctx.workers(), [&](std::size_t ii) {
    const auto i = static_cast<Eigen::Index>(ii);
    RngStream rng = ctx.stream(Step::kEta, t, ii);
    s.eta.row(i) = post.draw(rhs.col(i), rng).transpose();
  });
}

/// Step v: sigma_j^-2 ~ Ga(a_sigma + n/2, b_sigma + SSR_j / 2).
inline void update_sigma(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const Matrix resid = s.eps - s.eta * s.lambda.transpose();
  const double shape = ctx.hp().a_sigma + 0.5 * static_cast<double>(ctx.n());
  parallel_for(static_cast<std::size_t>(ctx.p()), ctx.workers(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    RngStream rng = ctx.stream(Step::kSigma, t, jj);
    const double rate = ctx.hp().b_sigma + 0.5 * resid.col(j).squaredNorm();
    s.sigma2(j) = 1.0 / sample_gamma(shape, rate, rng);
  });
}

/// Probability that varphi_jh = 1 when phi_jh = 0.
inline double varphi_given_zero_phi(double q, double c_p) {
  const double on = q * (1.0 - c_p);
  return on / (on + 1.0 - q);
}

/// Step vi: augmented indicators varphi, then Gamma_B through Polya-Gamma
/// auxiliaries PG(1, w_jB' gamma_hB).
inline void update_local_scale_aug(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const HyperParams& hp = ctx.hp();
  const Matrix& wb = ctx.cov().wB;
  const Matrix lp = wb * s.gamma_b;  // p x k
  const Eigen::Index k = s.k();
  parallel_for(static_cast<std::size_t>(ctx.p()), ctx.workers(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    RngStream rng = ctx.stream(Step::kLocalAug, t, jj);
    for (Eigen::Index h = 0; h < k; ++h) {
      if (s.phi(j, h) != 0) {
        s.varphi(j, h) = 1;
      } else {
        s.varphi(j, h) = sample_bernoulli(varphi_given_zero_phi(logistic(lp(j, h)), hp.c_p), rng);
      }
    }
  });
  const double prior_prec = 1.0 / hp.sigma_gamma2;
  parallel_for(static_cast<std::size_t>(k), ctx.workers(), [&](std::size_t hh) {
    const auto h = static_cast<Eigen::Index>(hh);
    RngStream rng = ctx.stream(Step::kPolyaGamma, t, hh);
    Vector omega(ctx.p());
    Vector kappa(ctx.p());
    for (Eigen::Index j = 0; j < ctx.p(); ++j) {
      omega(j) = sample_polya_gamma(lp(j, h), rng);
      kappa(j) = static_cast<double>(s.varphi(j, h)) - 0.5;
    }
    Matrix precision = wb.transpose() * omega.asDiagonal() * wb;
    precision.diagonal().array() += prior_prec;
    s.gamma_b.col(h) = GaussianPrecision(precision).draw(wb.transpose() * kappa, rng);
  });
}

/// Step vii: rows of lambda_tilde; effective loadings rebuilt afterwards.
inline void update_lambda(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const Eigen::Index k = s.k();
  const Matrix ete = s.eta.transpose() * s.eta;  // k x k
  const Matrix ete_eps = s.eta.transpose() * s.eps;  // k x p
  parallel_for(static_cast<std::size_t>(ctx.p()), ctx.workers(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    RngStream rng = ctx.stream(Step::kLambda, t, jj);
    const double prec_j = 1.0 / s.sigma2(j);
    Vector f(k);
    for (Eigen::Index h = 0; h < k; ++h) f(h) = (s.rho(h) != 0 && s.phi(j, h) != 0) ? 1.0 : 0.0;
    Matrix precision = prec_j * (f.asDiagonal() * ete * f.asDiagonal());
    precision.diagonal() += detail::inverse(s.vartheta);
    const Vector b = prec_j * f.cwiseProduct(ete_eps.col(j));
    const Vector draw = GaussianPrecision(precision).draw(b, rng);
    s.lambda_tilde.row(j) = draw.transpose();
    s.lambda.row(j) = f.cwiseProduct(draw).transpose();
  });
}

/// Log-likelihood gain of including factor h (with loadings phi_h * lambda_tilde_h)
/// over excluding it, given the other factors' current contributions.
/// Computed from scratch; the step itself uses an incremental form.
inline double factor_inclusion_log_gain(const ChainState& s, Eigen::Index h) {
  const Vector inv_s2 = detail::inverse(s.sigma2);
  const Matrix others = s.eps - s.eta * s.lambda.transpose() + s.eta.col(h) * s.lambda.col(h).transpose();
  const Vector proj = others.transpose() * s.eta.col(h);  // eta_h' R0_j per j
  const double eta_sq = s.eta.col(h).squaredNorm();
  double gain = 0.0;
  for (Eigen::Index j = 0; j < s.lambda.rows(); ++j) {
    const double ls = s.phi(j, h) != 0 ? s.lambda_tilde(j, h) : 0.0;
    gain += inv_s2(j) * (ls * proj(j) - 0.5 * ls * ls * eta_sq);
  }
  return gain;
}

/// Unnormalised log-probabilities of xi_h = l (l = 1..k), h zero-based.
inline std::vector<double> xi_log_weights(const Vector& u, double inclusion_gain, Eigen::Index h) {
  std::vector<double> lw(static_cast<std::size_t>(u.size()));
  for (Eigen::Index l = 0; l < u.size(); ++l) {
    lw[static_cast<std::size_t>(l)] = std::log(u(l)) + (l > h ? inclusion_gain : 0.0);
  }
  return lw;
}

/// Step viii: allocations xi_h (sequential in h, rho_h and lambda_h updated
/// immediately), column scales vartheta, stick fractions v and weights u.
inline void update_rho_theta_sticks(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const HyperParams& hp = ctx.hp();
  const Eigen::Index k = s.k();
  const Eigen::Index p = ctx.p();
  RngStream rng = ctx.stream(Step::kRhoTheta, t);
  const Vector inv_s2 = detail::inverse(s.sigma2);
  const Matrix ete = s.eta.transpose() * s.eta;
  // proj = eta' (eps - eta Lambda'), kept current as rho changes.
  Matrix proj = s.eta.transpose() * s.eps - ete * s.lambda.transpose();
  s.xi.assign(static_cast<std::size_t>(k), 0);
  for (Eigen::Index h = 0; h < k; ++h) {
    const double eta_sq = ete(h, h);
    double gain = 0.0;
    Vector star(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      star(j) = s.phi(j, h) != 0 ? s.lambda_tilde(j, h) : 0.0;
      const double base = proj(h, j) + eta_sq * s.lambda(j, h);
      gain += inv_s2(j) * (star(j) * base - 0.5 * star(j) * star(j) * eta_sq);
    }
    const std::vector<double> lw = xi_log_weights(s.u, gain, h);
    const auto l = static_cast<Eigen::Index>(sample_categorical_log(lw, rng));
    s.xi[static_cast<std::size_t>(h)] = static_cast<int>(l) + 1;
    const bool active = l > h;
    if (active != (s.rho(h) != 0)) {
      const Vector next = active ? star : Vector::Zero(p);
      const Vector delta = next - s.lambda.col(h);
      s.lambda.col(h) = next;
      proj.noalias() -= ete.col(h) * delta.transpose();
      s.rho(h) = active;
    }
  }
  for (Eigen::Index h = 0; h < k; ++h) {
    const double rate = hp.b_theta + 0.5 * s.lambda_tilde.col(h).squaredNorm();
    s.vartheta(h) = 1.0 / sample_gamma(hp.a_theta + 0.5 * static_cast<double>(p), rate, rng);
  }
  for (Eigen::Index l = 0; l + 1 < k; ++l) {
    double equal = 0.0, above = 0.0;
    for (int x : s.xi) {
      equal += x == l + 1;
      above += x > l + 1;
    }
    s.v(l) = sample_beta(1.0 + equal, hp.alpha + above, rng);
  }
  s.v(k - 1) = 1.0;
  s.u = stick_breaking(s.v);
}

/// Log-odds of phi_jh = 1 for an active factor, given the residual
/// projection eta_h' r0 with factor h excluded.
inline double phi_log_odds(double q, double c_p, double lambda_tilde, double proj_excluded, double eta_sq,
                           double inv_s2) {
  const double prior = std::log(q * c_p) - std::log1p(-q * c_p);
  return prior + inv_s2 * (lambda_tilde * proj_excluded - 0.5 * lambda_tilde * lambda_tilde * eta_sq);
}

/// Step ix: local scales phi_jh, sequential in h and parallel in j.
inline void update_phi(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  const double c_p = ctx.hp().c_p;
  const Eigen::Index k = s.k();
  const Matrix lp = ctx.cov().wB * s.gamma_b;
  const Matrix ete = s.eta.transpose() * s.eta;
  const Matrix ete_eps = s.eta.transpose() * s.eps;
  parallel_for(static_cast<std::size_t>(ctx.p()), ctx.workers(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    RngStream rng = ctx.stream(Step::kPhi, t, jj);
    const double inv_s2 = 1.0 / s.sigma2(j);
    Vector proj = ete_eps.col(j) - ete * s.lambda.row(j).transpose();
    for (Eigen::Index h = 0; h < k; ++h) {
      const double q = logistic(lp(j, h));
      if (s.rho(h) == 0) {
        s.phi(j, h) = sample_bernoulli(c_p * q, rng);
        continue;
      }
      const double old = s.lambda(j, h);
      const double excluded = proj(h) + ete(h, h) * old;
      const double odds = phi_log_odds(q, c_p, s.lambda_tilde(j, h), excluded, ete(h, h), inv_s2);
      const bool on = sample_bernoulli(logistic(odds), rng);
      s.phi(j, h) = on;
      const double next = on ? s.lambda_tilde(j, h) : 0.0;
      if (next != old) {
        proj -= ete.col(h) * (next - old);
        s.lambda(j, h) = next;
      }
    }
  });
}

/// Steps i-ix in order, without truncation adaptation.
inline void gibbs_sweep(ChainState& s, const GibbsContext& ctx, std::uint64_t t) {
  update_z(s, ctx, t);
  update_gamma_t(s, ctx, t);
  update_beta(s, ctx, t);
  update_eta(s, ctx, t);
  update_sigma(s, ctx, t);
  update_local_scale_aug(s, ctx, t);
  update_lambda(s, ctx, t);
  update_rho_theta_sticks(s, ctx, t);
  update_phi(s, ctx, t);
}

struct AdaptationEvent {
  int iteration = 0;
  int k_before = 0;
  int k_after = 0;
};

/// Keeps the listed columns (in order) and appends `fresh` prior-drawn
/// inactive columns; the last stick fraction is reset to one.
inline void reshape_columns(ChainState& s, const GibbsContext& ctx, const std::vector<Eigen::Index>& keep,
                            int fresh, RngStream& rng) {
  const auto k_new = static_cast<Eigen::Index>(keep.size()) + fresh;
  ChainState out;
  out.z = std::move(s.z);
  out.beta = std::move(s.beta);
  out.gamma_t = std::move(s.gamma_t);
  out.sigma2 = std::move(s.sigma2);
  out.eps = std::move(s.eps);
  out.eta.resize(s.eta.rows(), k_new);
  out.lambda_tilde.resize(s.lambda_tilde.rows(), k_new);
  out.phi.resize(s.phi.rows(), k_new);
  out.varphi.resize(s.varphi.rows(), k_new);
  out.rho.resize(k_new);
  out.vartheta.resize(k_new);
  out.v.resize(k_new);
  out.gamma_b.resize(s.gamma_b.rows(), k_new);
  out.xi.assign(static_cast<std::size_t>(k_new), 0);
  for (std::size_t c = 0; c < keep.size(); ++c) {
    const auto dst = static_cast<Eigen::Index>(c);
    const Eigen::Index src = keep[c];
    out.eta.col(dst) = s.eta.col(src);
    out.lambda_tilde.col(dst) = s.lambda_tilde.col(src);
    out.phi.col(dst) = s.phi.col(src);
    out.varphi.col(dst) = s.varphi.col(src);
    out.rho(dst) = s.rho(src);
    out.vartheta(dst) = s.vartheta(src);
    out.v(dst) = s.v(src);
    out.gamma_b.col(dst) = s.gamma_b.col(src);
  }
  for (Eigen::Index h = static_cast<Eigen::Index>(keep.size()); h < k_new; ++h)
    detail::draw_column_from_prior(out, ctx, h, false, rng);
  out.v(k_new - 1) = 1.0;
  out.u = stick_breaking(out.v);
  out.refresh_lambda();
  s = std::move(out);
}

/// Truncation adaptation at iteration t (t >= adapt_start), triggered with
/// probability exp(c0 + c1 t). When fewer than k*-1 columns are active the
/// inactive ones are dropped and one fresh inactive column is kept as a
/// buffer; otherwise one fresh column is appended while k* < k_max.
/// Returns the event if adaptation was triggered.
inline std::optional<AdaptationEvent> adapt_truncation(ChainState& s, const GibbsContext& ctx, int t) {
  const HyperParams& hp = ctx.hp();
  if (t < hp.adapt_start) return std::nullopt;
  RngStream rng = ctx.stream(Step::kAdapt, static_cast<std::uint64_t>(t));
  if (!(rng.uniform() < hp.adaptation_probability(t))) return std::nullopt;
  const auto k = static_cast<int>(s.k());
  std::vector<Eigen::Index> active;
  for (Eigen::Index h = 0; h < s.k(); ++h)
    if (s.rho(h) != 0) active.push_back(h);
  const auto n_active = static_cast<int>(active.size());
  if (n_active < k - 1) {
    reshape_columns(s, ctx, active, 1, rng);
  } else if (k < hp.k_max) {
    std::vector<Eigen::Index> all(static_cast<std::size_t>(k));
    for (int h = 0; h < k; ++h) all[static_cast<std::size_t>(h)] = h;
    reshape_columns(s, ctx, all, 1, rng);
  }
  return AdaptationEvent{t, k, static_cast<int>(s.k())};
}

/// One retained iteration.
struct Draw {
  int iteration = 0;
  Matrix beta;     // d x p
  Vector sigma2;   // p
  Matrix eta;      // n x k
  Matrix lambda;   // p x k effective loadings
  Matrix gamma_t;  // d x qT
  Matrix gamma_b;  // qB x k
  FlagVector rho;  // k

  Eigen::Index k() const { return eta.cols(); }
  Matrix contribution(Eigen::Index h) const { return eta.col(h) * lambda.col(h).transpose(); }

  std::vector<Eigen::Index> active_columns() const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index h = 0; h < k(); ++h)
      if (rho(h) != 0) out.push_back(h);
    return out;
  }

  static Draw from_state(const ChainState& s, int iteration) {
    return {iteration, s.beta, s.sigma2, s.eta, s.lambda, s.gamma_t, s.gamma_b, s.rho};
  }
};

struct DrawStoreMeta {
  int iterations = 0;
  int burn_in = 0;
  int thin = 1;
  std::uint64_t seed = 0;
  Eigen::Index n = 0, p = 0, d = 0, qt = 0, qb = 0;
  std::vector<AdaptationEvent> adaptations;
  std::vector<int> active_trace;  // active factors after each iteration
  std::vector<int> k_trace;       // k* after each iteration
};

struct DrawStore {
  DrawStoreMeta meta;
  std::vector<Draw> draws;
};

using DrawObserver = std::function<void(const ChainState&, int iteration)>;
using ProgressCallback = std::function<void(int iteration, int k_star, int active)>;

struct ChainOptions {
  std::size_t workers = 1;
  bool store_draws = true;
  DrawObserver on_draw;
  ProgressCallback progress;
  int progress_every = 1000;
};

/// Runs the adaptive Gibbs sampler, retaining every thin-th iteration after
/// burn-in. Sampler failures are rethrown with the iteration index attached.
inline DrawStore run_chain(const ValidatedInputs& in, const ChainOptions& options = {}) {
  const HyperParams& hp = in.hp;
  GibbsContext ctx(in, options.workers);
  DrawStore store;
  store.meta.iterations = hp.iterations;
  store.meta.burn_in = hp.burn_in;
  store.meta.thin = hp.thin;
  store.meta.seed = hp.seed;
  store.meta.n = in.y.n();
  store.meta.p = in.y.p();
  store.meta.d = in.cov.x.cols();
  store.meta.qt = in.cov.wT.cols();
  store.meta.qb = in.cov.wB.cols();
  store.meta.active_trace.reserve(static_cast<std::size_t>(hp.iterations));
  store.meta.k_trace.reserve(static_cast<std::size_t>(hp.iterations));
  if (options.store_draws) store.draws.reserve(hp.retained_draws());

  ChainState s = init_state(ctx);
  for (int t = 1; t <= hp.iterations; ++t) {
    try {
      gibbs_sweep(s, ctx, static_cast<std::uint64_t>(t));
      if (hp.adapt) {
        if (auto event = adapt_truncation(s, ctx, t)) store.meta.adaptations.push_back(*event);
      }
    } catch (const NumericalError& e) {
      throw NumericalError("iteration " + std::to_string(t) + ": " + e.what(), e.dimension());
    }
    store.meta.active_trace.push_back(s.active_count());
    store.meta.k_trace.push_back(static_cast<int>(s.k()));
    if (t > hp.burn_in && (t - hp.burn_in) % hp.thin == 0) {
      if (options.store_draws) store.draws.push_back(Draw::from_state(s, t));
      if (options.on_draw) options.on_draw(s, t);
    }
    if (options.progress && options.progress_every > 0 && t % options.progress_every == 0)
      options.progress(t, static_cast<int>(s.k()), s.active_count());
  }
  return store;
}

inline DrawStore run_chain(const CountMatrix& y, const Covariates& cov, const HyperParams& hp,
                           const ChainOptions& options = {}) {
  return run_chain(validate_inputs(y, cov, hp), options);
}

}  // namespace cosin
