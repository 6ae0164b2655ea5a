#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cosin/error.hpp"
#include "cosin/gibbs.hpp"
#include "cosin/model.hpp"

namespace cosin {

/// Rank-one contribution eta lambda' kept in factored form.
struct RankOne {
  Vector eta;
  Vector lambda;

  double norm() const { return eta.norm() * lambda.norm(); }
  Matrix dense() const { return eta * lambda.transpose(); }
};

// ||a - b||_F for two rank-one matrices, without forming them.
inline double frobenius_distance(const RankOne& a, const RankOne& b) {
  const double cross = a.eta.dot(b.eta) * a.lambda.dot(b.lambda);
  const double sq = a.eta.squaredNorm() * a.lambda.squaredNorm() + b.eta.squaredNorm() * b.lambda.squaredNorm() -
                    2.0 * cross;
  return std::sqrt(std::max(sq, 0.0));
}

// ||e l' - M||_F.
inline double frobenius_distance(const RankOne& a, const Matrix& m) {
  const double sq = a.eta.squaredNorm() * a.lambda.squaredNorm() - 2.0 * a.eta.dot(m * a.lambda) + m.squaredNorm();
  return std::sqrt(std::max(sq, 0.0));
}

/// Contributions of the active (rho = 1) factors of a draw, in column order.
inline std::vector<RankOne> draw_contributions(const Draw& d) {
  std::vector<RankOne> out;
  for (Eigen::Index h : d.active_columns()) out.push_back({d.eta.col(h), d.lambda.col(h)});
  return out;
}

struct AlignedContributions {
  // Columns of the final draw, sorted by decreasing Frobenius norm.
  std::vector<Eigen::Index> reference_order;
  // permutations[t][h]: column of draw t matched to reference slot h, or -1.
  std::vector<std::vector<Eigen::Index>> permutations;
  std::vector<Matrix> mean_contributions;
  std::vector<double> frobenius_norms;  // of the reference contributions
  // Mean over draws of the sum of contributions left unmatched.
  Matrix residual_contribution;
  std::size_t draws_with_surplus = 0;
};

/// Greedy matching of `candidates` to `reference` in reference order; each
/// slot takes the closest remaining candidate, or -1 when none remain.
inline std::vector<Eigen::Index> greedy_match(const std::vector<RankOne>& reference,
                                              const std::vector<RankOne>& candidates) {
  std::vector<Eigen::Index> match(reference.size(), -1);
  std::vector<bool> used(candidates.size(), false);
  for (std::size_t h = 0; h < reference.size(); ++h) {
    double best = kInf;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (used[c]) continue;
      const double dist = frobenius_distance(reference[h], candidates[c]);
      if (dist < best) {
        best = dist;
        match[h] = static_cast<Eigen::Index>(c);
      }
    }
    if (match[h] >= 0) used[static_cast<std::size_t>(match[h])] = true;
  }
  return match;
}

/// Aligns the contributions of every draw to the final draw's contributions
/// (sorted by decreasing Frobenius norm) and averages them per slot.
inline AlignedContributions align_contributions(const DrawStore& store) {
  if (store.draws.empty()) throw ValidationError("align_contributions: empty draw store");
  const Draw& last = store.draws.back();
  const std::vector<Eigen::Index> active = last.active_columns();
  std::vector<RankOne> last_contribs = draw_contributions(last);
  std::vector<std::size_t> order(last_contribs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return last_contribs[a].norm() > last_contribs[b].norm(); });

  AlignedContributions out;
  std::vector<RankOne> reference;
  for (std::size_t idx : order) {
    reference.push_back(last_contribs[idx]);
    out.reference_order.push_back(active[idx]);
    out.frobenius_norms.push_back(last_contribs[idx].norm());
  }
  const Eigen::Index n = last.eta.rows(), p = last.lambda.rows();
  out.mean_contributions.assign(reference.size(), Matrix::Zero(n, p));
  out.residual_contribution = Matrix::Zero(n, p);
  const double scale = 1.0 / static_cast<double>(store.draws.size());
  for (const Draw& d : store.draws) {
    const std::vector<Eigen::Index> cols = d.active_columns();
    const std::vector<RankOne> contribs = draw_contributions(d);
    const std::vector<Eigen::Index> match = greedy_match(reference, contribs);
    std::vector<bool> used(contribs.size(), false);
    std::vector<Eigen::Index> perm(match.size(), -1);
    for (std::size_t h = 0; h < match.size(); ++h) {
      if (match[h] < 0) continue;
      const auto c = static_cast<std::size_t>(match[h]);
      used[c] = true;
      perm[h] = cols[c];
      out.mean_contributions[h].noalias() += scale * contribs[c].eta * contribs[c].lambda.transpose();
    }
    bool surplus = false;
    for (std::size_t c = 0; c < contribs.size(); ++c) {
      if (used[c]) continue;
      surplus = true;
      out.residual_contribution.noalias() += scale * contribs[c].eta * contribs[c].lambda.transpose();
    }
    out.draws_with_surplus += surplus;
    out.permutations.push_back(std::move(perm));
  }
  return out;
}

/// Reorders every draw so that its active columns follow the reference
/// slots; unmatched slots become zero inactive columns and unmatched
/// surplus columns are dropped.
inline DrawStore apply_alignment(const DrawStore& store, const AlignedContributions& aligned) {
  DrawStore out;
  out.meta = store.meta;
  const auto slots = static_cast<Eigen::Index>(aligned.reference_order.size());
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    const Draw& d = store.draws[t];
    Draw r = d;
    r.eta = Matrix::Zero(d.eta.rows(), slots);
    r.lambda = Matrix::Zero(d.lambda.rows(), slots);
    r.gamma_b = Matrix::Zero(d.gamma_b.rows(), slots);
    r.rho = FlagVector::Zero(slots);
    for (Eigen::Index h = 0; h < slots; ++h) {
      const Eigen::Index src = aligned.permutations[t][static_cast<std::size_t>(h)];
      if (src < 0) continue;
      r.eta.col(h) = d.eta.col(src);
      r.lambda.col(h) = d.lambda.col(src);
      r.gamma_b.col(h) = d.gamma_b.col(src);
      r.rho(h) = 1;
    }
    out.draws.push_back(std::move(r));
  }
  return out;
}

struct RepresentativeDraw {
  std::size_t index = 0;
  double total_distance = 0.0;
  Matrix eta;     // aligned slot order (zero columns for unmatched slots)
  Matrix lambda;
  static constexpr const char* kMethod = "min-total-frobenius-distance-to-aligned-means";
};

/// Draw minimising sum_h ||C_h^(t) - mean C_h||_F over aligned slots;
/// ties go to the earliest draw.
inline RepresentativeDraw representative_draw(const DrawStore& store, const AlignedContributions& aligned) {
  if (store.draws.empty()) throw ValidationError("representative_draw: empty draw store");
  RepresentativeDraw best;
  best.total_distance = kInf;
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    const Draw& d = store.draws[t];
    double total = 0.0;
    for (std::size_t h = 0; h < aligned.mean_contributions.size(); ++h) {
      const Eigen::Index src = aligned.permutations[t][h];
      if (src < 0) {
        total += aligned.mean_contributions[h].norm();
      } else {
        total += frobenius_distance(RankOne{d.eta.col(src), d.lambda.col(src)}, aligned.mean_contributions[h]);
      }
    }
    if (total < best.total_distance) {
      best.total_distance = total;
      best.index = t;
    }
  }
  const Draw& d = store.draws[best.index];
  const auto slots = static_cast<Eigen::Index>(aligned.mean_contributions.size());
  best.eta = Matrix::Zero(d.eta.rows(), slots);
  best.lambda = Matrix::Zero(d.lambda.rows(), slots);
  for (Eigen::Index h = 0; h < slots; ++h) {
    const Eigen::Index src = aligned.permutations[best.index][static_cast<std::size_t>(h)];
    if (src < 0) continue;
    best.eta.col(h) = d.eta.col(src);
    best.lambda.col(h) = d.lambda.col(src);
  }
  return best;
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and nonempty.
inline double quantile_sorted(const std::vector<double>& sorted, double prob) {
  const double pos = prob * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double prob) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, prob);
}

struct BetaSummaryRow {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  int excluding_zero = 0;
};

/// Per covariate: five-number summary of the p posterior means, and the number
/// of genes whose equal-tailed `level` credible interval excludes zero.
inline std::vector<BetaSummaryRow> summarize_beta(const DrawStore& store, double level) {
  if (!(level > 0 && level < 1)) throw ValidationError("summarize_beta: level must lie in (0,1)");
  if (store.draws.empty()) throw ValidationError("summarize_beta: empty draw store");
  const Eigen::Index d = store.draws.front().beta.rows(), p = store.draws.front().beta.cols();
  const double lo_prob = 0.5 * (1.0 - level), hi_prob = 0.5 * (1.0 + level);
  std::vector<BetaSummaryRow> rows(static_cast<std::size_t>(d));
  std::vector<double> samples(store.draws.size());
  for (Eigen::Index l = 0; l < d; ++l) {
    std::vector<double> means(static_cast<std::size_t>(p));
    int excluding = 0;
    for (Eigen::Index j = 0; j < p; ++j) {
      double sum = 0.0;
      for (std::size_t t = 0; t < store.draws.size(); ++t) {
        samples[t] = store.draws[t].beta(l, j);
        sum += samples[t];
      }
      means[static_cast<std::size_t>(j)] = sum / static_cast<double>(samples.size());
      std::vector<double> sorted = samples;
      std::sort(sorted.begin(), sorted.end());
      const double lo = quantile_sorted(sorted, lo_prob), hi = quantile_sorted(sorted, hi_prob);
      excluding += lo > 0.0 || hi < 0.0;
    }
    std::sort(means.begin(), means.end());
    rows[static_cast<std::size_t>(l)] = {means.front(), quantile_sorted(means, 0.25), quantile_sorted(means, 0.5),
                                         quantile_sorted(means, 0.75), means.back(), excluding};
  }
  return rows;
}

struct GraphEdge {
  Eigen::Index j = 0;
  Eigen::Index k = 0;
  double weight = 0.0;
};

struct GeneGraph {
  Eigen::Index p = 0;
  std::vector<GraphEdge> edges;  // j < k, sorted by (j, k)
  double threshold = 0.0;
  Matrix mean_partial;          // p x p posterior mean partial correlations (zero diagonal)
  std::vector<std::size_t> jittered_draws;
};

enum class GraphForm { kCorrelation, kCovariance };

/// Partial correlations -w_jk / sqrt(w_jj w_kk) from a precision matrix.
inline Matrix partial_correlations(const Matrix& precision) {
  const Vector s = precision.diagonal().cwiseSqrt().cwiseInverse();
  Matrix out = -(s.asDiagonal() * precision * s.asDiagonal());
  out.diagonal().setZero();
  return out;
}

/// Precision of Omega = Lambda Lambda' + Sigma for one draw.
/// Correlation form: dense Cholesky inverse of the correlation matrix.
/// Covariance form: Woodbury identity on Omega.
inline Matrix draw_precision(const Draw& d, GraphForm form, bool* jittered = nullptr) {
  const Eigen::Index p = d.lambda.rows();
  if (form == GraphForm::kCovariance) {
    const Vector inv_s = d.sigma2.cwiseInverse();
    const Matrix scaled = inv_s.asDiagonal() * d.lambda;
    const Eigen::Index k = d.lambda.cols();
    const GaussianPrecision inner(Matrix::Identity(k, k) + d.lambda.transpose() * scaled);
    Matrix correction(k, p);
    const Matrix rhs = scaled.transpose();
    for (Eigen::Index j = 0; j < p; ++j) correction.col(j) = inner.mean(rhs.col(j));
    Matrix out = -scaled * correction;
    out.diagonal() += inv_s;
    if (jittered) *jittered = inner.jittered();
    return out;
  }
  Matrix omega = d.lambda * d.lambda.transpose();
  omega.diagonal() += d.sigma2;
  const Vector s = omega.diagonal().cwiseSqrt().cwiseInverse();
  Matrix corr = s.asDiagonal() * omega * s.asDiagonal();
  Eigen::LLT<Matrix> llt(corr);
  bool used_jitter = false;
  if (llt.info() != Eigen::Success) {
    corr.diagonal().array() += kJitterScale;
    llt.compute(corr);
    used_jitter = true;
    if (llt.info() != Eigen::Success)
      throw NumericalError("correlation matrix not positive definite after jitter", p);
  }
  if (jittered) *jittered = used_jitter;
  return llt.solve(Matrix::Identity(p, p));
}

/// Posterior-mean partial-correlation graph of Omega = Lambda Lambda' + Sigma;
/// edges with |weight| < threshold (or exactly zero) are dropped.
inline GeneGraph covariance_graph(const DrawStore& store, double threshold,
                                  GraphForm form = GraphForm::kCorrelation) {
  if (!(threshold >= 0)) throw ValidationError("covariance_graph: threshold must be nonnegative");
  if (store.draws.empty()) throw ValidationError("covariance_graph: empty draw store");
  const Eigen::Index p = store.draws.front().lambda.rows();
  GeneGraph g;
  g.p = p;
  g.threshold = threshold;
  g.mean_partial = Matrix::Zero(p, p);
  const double scale = 1.0 / static_cast<double>(store.draws.size());
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    bool jittered = false;
    g.mean_partial.noalias() += scale * partial_correlations(draw_precision(store.draws[t], form, &jittered));
    if (jittered) g.jittered_draws.push_back(t);
  }
  // Exact symmetry of the reported weights.
  g.mean_partial = 0.5 * (g.mean_partial + g.mean_partial.transpose()).eval();
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index k = j + 1; k < p; ++k)
      if (g.mean_partial(j, k) != 0.0 && std::abs(g.mean_partial(j, k)) >= threshold)
        g.edges.push_back({j, k, g.mean_partial(j, k)});
  return g;
}

struct HoldoutPrediction {
  std::vector<Eigen::Index> rows, cols;   // held-out coordinates, column-major order
  std::vector<double> mean_prediction;    // average of per-draw counts
  std::vector<double> per_draw_mae;
  double mae = 0.0;                       // average of per-draw MAE
};

/// Held-out coordinates of a mask, column-major.
inline void masked_coordinates(const FlagGrid& mask, std::vector<Eigen::Index>& rows,
                               std::vector<Eigen::Index>& cols) {
  rows.clear();
  cols.clear();
  for (Eigen::Index j = 0; j < mask.cols(); ++j)
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
      if (mask(i, j) != 0) {
        rows.push_back(i);
        cols.push_back(j);
      }
}

/// Plug-in count prediction floor(exp(m)) for one draw at the given entries,
/// m = x_i' beta_j + eta_i' lambda_j. With `noise`, adds N(0, sigma_j^2) to m.
inline std::vector<std::int64_t> predict_counts(const Draw& d, const Matrix& x, const std::vector<Eigen::Index>& rows,
                                                const std::vector<Eigen::Index>& cols, RngStream* noise = nullptr) {
  std::vector<std::int64_t> out(rows.size());
  for (std::size_t l = 0; l < rows.size(); ++l) {
    const Eigen::Index i = rows[l], j = cols[l];
    double m = x.row(i).dot(d.beta.col(j)) + d.eta.row(i).dot(d.lambda.row(j));
    if (noise) m += std::sqrt(d.sigma2(j)) * noise->normal();
    out[l] = apply_link(m).count;
  }
  return out;
}

/// Per-draw and draw-averaged holdout predictions plus the draw-averaged MAE
/// against the true held-out counts `truth` (entries read only where masked).
inline HoldoutPrediction predict_holdout(const DrawStore& store, const Covariates& cov, const FlagGrid& mask,
                                         const CountGrid& truth, bool with_noise = false,
                                         std::uint64_t noise_seed = 0) {
  if (store.draws.empty()) throw ValidationError("predict_holdout: empty draw store");
  HoldoutPrediction out;
  masked_coordinates(mask, out.rows, out.cols);
  if (out.rows.empty()) throw ValidationError("predict_holdout: mask is empty");
  out.mean_prediction.assign(out.rows.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(store.draws.size());
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    RngStream rng(noise_seed, t);
    const auto pred = predict_counts(store.draws[t], cov.x, out.rows, out.cols, with_noise ? &rng : nullptr);
    double abs_err = 0.0;
    for (std::size_t l = 0; l < pred.size(); ++l) {
      out.mean_prediction[l] += scale * static_cast<double>(pred[l]);
      abs_err += std::abs(static_cast<double>(truth(out.rows[l], out.cols[l]) - pred[l]));
    }
    out.per_draw_mae.push_back(abs_err / static_cast<double>(pred.size()));
  }
  out.mae = std::accumulate(out.per_draw_mae.begin(), out.per_draw_mae.end(), 0.0) * scale;
  return out;
}

}  // namespace cosin
