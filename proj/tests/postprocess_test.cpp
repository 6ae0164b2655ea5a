#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "cosin/postprocess.hpp"
#include "cosin/sim_bench.hpp"

using namespace cosin;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

Draw make_draw(const Matrix& eta, const Matrix& lambda, int iteration = 0) {
  Draw d;
  d.iteration = iteration;
  d.eta = eta;
  d.lambda = lambda;
  d.beta = Matrix::Zero(1, lambda.rows());
  d.sigma2 = Vector::Ones(lambda.rows());
  d.gamma_t = Matrix::Zero(1, 1);
  d.gamma_b = Matrix::Zero(1, eta.cols());
  d.rho = FlagVector::Ones(eta.cols());
  return d;
}

Draw permuted(const Draw& d, const std::vector<Eigen::Index>& perm) {
  Draw out = d;
  for (std::size_t c = 0; c < perm.size(); ++c) {
    out.eta.col(static_cast<Eigen::Index>(c)) = d.eta.col(perm[c]);
    out.lambda.col(static_cast<Eigen::Index>(c)) = d.lambda.col(perm[c]);
  }
  return out;
}

// Three contributions with clearly different norms.
struct Toy {
  Matrix eta, lambda;
  Toy(Eigen::Index n = 6, Eigen::Index p = 5, std::uint64_t seed = 1) {
    RngStream rng(seed, 0);
    eta = random_matrix(n, 3, rng);
    lambda = random_matrix(p, 3, rng);
    eta.col(0) *= 3.0;
    eta.col(2) *= 0.4;
  }
  Matrix contribution(Eigen::Index h) const { return eta.col(h) * lambda.col(h).transpose(); }
};

double dense_quantile(std::vector<double> v, double prob) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * prob;
  const double lo = std::floor(h);
  const auto i = static_cast<std::size_t>(lo);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (h - lo) * (v[i + 1] - v[i]);
}

}  // namespace

TEST(Align, EmptyStoreRejected) {
  DrawStore store;
  EXPECT_THROW(align_contributions(store), ValidationError);
}

TEST(Align, SingleDrawGivesSortedContributions) {
  Toy toy;
  DrawStore store;
  store.draws.push_back(permuted(make_draw(toy.eta, toy.lambda), {2, 0, 1}));
  const auto a = align_contributions(store);
  ASSERT_EQ(a.mean_contributions.size(), 3u);
  std::vector<double> norms;
  for (Eigen::Index h = 0; h < 3; ++h) norms.push_back(toy.contribution(h).norm());
  for (std::size_t h = 1; h < 3; ++h) EXPECT_GE(a.frobenius_norms[h - 1], a.frobenius_norms[h]);
  std::vector<Eigen::Index> by_norm = {0, 1, 2};
  std::sort(by_norm.begin(), by_norm.end(), [&](auto x, auto y) { return norms[x] > norms[y]; });
  for (std::size_t h = 0; h < 3; ++h)
    EXPECT_TRUE(a.mean_contributions[h].isApprox(toy.contribution(by_norm[h]), 1e-12));
}

TEST(Align, PermutedDrawsReproduceReferenceExactly) {
  Toy toy;
  DrawStore store;
  const std::vector<std::vector<Eigen::Index>> perms = {{0, 1, 2}, {1, 2, 0}, {2, 1, 0}, {0, 2, 1}, {1, 0, 2}};
  for (int rep = 0; rep < 4; ++rep)
    for (const auto& perm : perms) store.draws.push_back(permuted(make_draw(toy.eta, toy.lambda), perm));
  const auto a = align_contributions(store);
  for (std::size_t h = 0; h < 3; ++h) {
    const Matrix& ref = a.mean_contributions[h];
    const Eigen::Index col = a.reference_order[h];
    EXPECT_LT((ref - store.draws.back().contribution(col)).norm(), 1e-12);
  }
  for (const auto& perm : a.permutations) {
    std::vector<Eigen::Index> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<Eigen::Index>{0, 1, 2}));
  }
  EXPECT_EQ(a.residual_contribution.norm(), 0.0);
}

TEST(Align, GreedyAgreesWithExhaustiveMatching) {
  Toy toy(8, 6, 2);
  RngStream rng(2, 1);
  const std::vector<RankOne> reference = {{toy.eta.col(0), toy.lambda.col(0)},
                                          {toy.eta.col(1), toy.lambda.col(1)},
                                          {toy.eta.col(2), toy.lambda.col(2)}};
  int agree = 0;
  const int draws = 50;
  for (int t = 0; t < draws; ++t) {
    std::array<Eigen::Index, 3> perm = {0, 1, 2};
    for (int s = 2; s > 0; --s) std::swap(perm[static_cast<std::size_t>(s)], perm[rng.uniform_index(s + 1)]);
    std::vector<RankOne> candidates(3);
    for (std::size_t c = 0; c < 3; ++c) {
      const auto src = perm[c];
      candidates[c] = {toy.eta.col(src) + random_matrix(8, 1, rng, 0.3).col(0),
                       toy.lambda.col(src) + random_matrix(6, 1, rng, 0.3).col(0)};
    }
    const auto greedy = greedy_match(reference, candidates);
    std::array<Eigen::Index, 3> best{}, trial = {0, 1, 2};
    double best_cost = kInf;
    do {
      double cost = 0.0;
      for (std::size_t h = 0; h < 3; ++h) cost += frobenius_distance(reference[h], candidates[trial[h]].dense());
      if (cost < best_cost) {
        best_cost = cost;
        best = trial;
      }
    } while (std::next_permutation(trial.begin(), trial.end()));
    agree += std::equal(best.begin(), best.end(), greedy.begin());
  }
  EXPECT_GE(agree, static_cast<int>(std::ceil(0.95 * draws)));
}

TEST(Align, ShortAndLongDraws) {
  Toy toy;
  DrawStore store;
  Draw short_draw = make_draw(toy.eta, toy.lambda);
  short_draw.rho(1) = 0;
  short_draw.lambda.col(1).setZero();
  Matrix extra_eta(6, 4), extra_lambda(5, 4);
  extra_eta << toy.eta, toy.eta.col(0) * 0.01;
  extra_lambda << toy.lambda, toy.lambda.col(0);
  store.draws.push_back(short_draw);
  store.draws.push_back(make_draw(extra_eta, extra_lambda));
  store.draws.push_back(make_draw(toy.eta, toy.lambda));
  const auto a = align_contributions(store);
  ASSERT_EQ(a.mean_contributions.size(), 3u);
  const auto& first = a.permutations[0];
  EXPECT_EQ(std::count(first.begin(), first.end(), -1), 1);
  EXPECT_EQ(a.draws_with_surplus, 1u);
  EXPECT_NEAR(a.residual_contribution.norm(), (toy.eta.col(0) * 0.01 * toy.lambda.col(0).transpose()).norm() / 3.0,
              1e-12);
}

TEST(Align, Idempotent) {
  RngStream rng(3, 0);
  DrawStore store;
  Toy toy(6, 5, 3);
  for (int t = 0; t < 30; ++t) {
    std::vector<Eigen::Index> perm = {0, 1, 2};
    std::swap(perm[rng.uniform_index(3)], perm[rng.uniform_index(3)]);
    store.draws.push_back(
        permuted(make_draw(toy.eta + random_matrix(6, 3, rng, 0.1), toy.lambda + random_matrix(5, 3, rng, 0.1)), perm));
  }
  const auto a = align_contributions(store);
  const DrawStore aligned = apply_alignment(store, a);
  const auto b = align_contributions(aligned);
  for (const auto& perm : b.permutations)
    for (std::size_t h = 0; h < perm.size(); ++h) EXPECT_EQ(perm[h], static_cast<Eigen::Index>(h));
  for (std::size_t h = 0; h < 3; ++h) EXPECT_LT((a.mean_contributions[h] - b.mean_contributions[h]).norm(), 1e-12);
}

TEST(Align, SignFlipsChangeNothingDownstream) {
  RngStream rng(4, 0);
  DrawStore store;
  Toy toy(6, 5, 4);
  for (int t = 0; t < 20; ++t) {
    Draw d = make_draw(toy.eta + random_matrix(6, 3, rng, 0.2), toy.lambda + random_matrix(5, 3, rng, 0.2));
    for (Eigen::Index j = 0; j < 5; ++j) d.sigma2(j) = 0.5 + rng.uniform();
    store.draws.push_back(d);
  }
  DrawStore flipped = store;
  for (std::size_t t = 0; t < flipped.draws.size(); t += 2) {
    flipped.draws[t].eta.col(1) *= -1.0;
    flipped.draws[t].lambda.col(1) *= -1.0;
  }
  const auto a = align_contributions(store);
  const auto b = align_contributions(flipped);
  EXPECT_EQ(a.permutations, b.permutations);
  for (std::size_t h = 0; h < 3; ++h) EXPECT_LT((a.mean_contributions[h] - b.mean_contributions[h]).norm(), 1e-12);
  EXPECT_EQ(representative_draw(store, a).index, representative_draw(flipped, b).index);
  const auto ga = covariance_graph(store, 0.0), gb = covariance_graph(flipped, 0.0);
  EXPECT_LT((ga.mean_partial - gb.mean_partial).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Representative, IdenticalDrawsPickFirst) {
  Toy toy;
  DrawStore store;
  for (int t = 0; t < 5; ++t) store.draws.push_back(make_draw(toy.eta, toy.lambda, t));
  EXPECT_EQ(representative_draw(store, align_contributions(store)).index, 0u);
}

TEST(Representative, DrawEqualToMeanIsSelected) {
  Toy toy;
  DrawStore store;
  for (double s : {0.5, 1.5, 1.0}) store.draws.push_back(make_draw(toy.eta * s, toy.lambda));
  const auto rep = representative_draw(store, align_contributions(store));
  EXPECT_EQ(rep.index, 2u);
  EXPECT_NEAR(rep.total_distance, 0.0, 1e-10);
}

TEST(Representative, MatchesDenseScanOracle) {
  RngStream rng(5, 0);
  DrawStore store;
  Toy toy(7, 6, 5);
  for (int t = 0; t < 20; ++t) {
    std::vector<Eigen::Index> perm = {0, 1, 2};
    std::swap(perm[rng.uniform_index(3)], perm[rng.uniform_index(3)]);
    store.draws.push_back(
        permuted(make_draw(toy.eta + random_matrix(7, 3, rng, 0.3), toy.lambda + random_matrix(6, 3, rng, 0.3)), perm));
  }
  const auto a = align_contributions(store);
  std::size_t best = 0;
  double best_total = kInf;
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    double total = 0.0;
    for (std::size_t h = 0; h < 3; ++h) {
      const Eigen::Index col = a.permutations[t][h];
      const Matrix c = col < 0 ? Matrix::Zero(7, 6) : store.draws[t].contribution(col);
      total += (c - a.mean_contributions[h]).norm();
    }
    if (total < best_total) {
      best_total = total;
      best = t;
    }
  }
  const auto rep = representative_draw(store, a);
  EXPECT_EQ(rep.index, best);
  EXPECT_NEAR(rep.total_distance, best_total, 1e-9);
  EXPECT_STREQ(RepresentativeDraw::kMethod, "min-total-frobenius-distance-to-aligned-means");
}

TEST(BetaSummary, ZeroDraws) {
  DrawStore store;
  for (int t = 0; t < 10; ++t) {
    Draw d = make_draw(Matrix::Zero(3, 1), Matrix::Zero(4, 1));
    d.beta = Matrix::Zero(2, 4);
    store.draws.push_back(d);
  }
  for (const auto& r : summarize_beta(store, 0.9)) {
    EXPECT_EQ(r.excluding_zero, 0);
    EXPECT_EQ(r.min, 0.0);
    EXPECT_EQ(r.max, 0.0);
  }
}

TEST(BetaSummary, ConstantOneGeneExcludesZero) {
  RngStream rng(6, 0);
  DrawStore store;
  for (int t = 0; t < 100; ++t) {
    Draw d = make_draw(Matrix::Zero(3, 1), Matrix::Zero(4, 1));
    d.beta = random_matrix(1, 4, rng);
    d.beta(0, 2) = 1.0;
    store.draws.push_back(d);
  }
  const auto rows = summarize_beta(store, 0.9);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].excluding_zero, 1);
  EXPECT_EQ(rows[0].max, 1.0);
}

TEST(BetaSummary, MatchesQuantileOracle) {
  RngStream rng(7, 0);
  const Eigen::Index d = 3, p = 40;
  const int draws = 301;
  Matrix centers = random_matrix(d, p, rng, 0.4);
  DrawStore store;
  for (int t = 0; t < draws; ++t) {
    Draw dr = make_draw(Matrix::Zero(2, 1), Matrix::Zero(p, 1));
    dr.beta = centers + random_matrix(d, p, rng, 0.25);
    store.draws.push_back(dr);
  }
  for (double level : {0.5, 0.9, 0.95}) {
    const auto rows = summarize_beta(store, level);
    for (Eigen::Index l = 0; l < d; ++l) {
      std::vector<double> means;
      int excluding = 0;
      for (Eigen::Index j = 0; j < p; ++j) {
        std::vector<double> s;
        for (const auto& dr : store.draws) s.push_back(dr.beta(l, j));
        means.push_back(std::accumulate(s.begin(), s.end(), 0.0) / draws);
        const double lo = dense_quantile(s, (1 - level) / 2), hi = dense_quantile(s, (1 + level) / 2);
        excluding += lo > 0 || hi < 0;
      }
      const auto& r = rows[static_cast<std::size_t>(l)];
      EXPECT_EQ(r.excluding_zero, excluding);
      EXPECT_NEAR(r.median, dense_quantile(means, 0.5), 1e-12);
      EXPECT_NEAR(r.q1, dense_quantile(means, 0.25), 1e-12);
      EXPECT_NEAR(r.q3, dense_quantile(means, 0.75), 1e-12);
      EXPECT_NEAR(r.min, *std::min_element(means.begin(), means.end()), 1e-12);
      EXPECT_NEAR(r.max, *std::max_element(means.begin(), means.end()), 1e-12);
      EXPECT_LE(r.min, r.q1);
      EXPECT_LE(r.q1, r.median);
      EXPECT_LE(r.median, r.q3);
      EXPECT_LE(r.q3, r.max);
    }
  }
  EXPECT_THROW(summarize_beta(store, 1.0), ValidationError);
  EXPECT_THROW(summarize_beta(store, 0.0), ValidationError);
}

TEST(Graph, DiagonalOmegaHasNoEdges) {
  DrawStore store;
  for (int t = 0; t < 3; ++t) store.draws.push_back(make_draw(Matrix::Zero(4, 2), Matrix::Zero(5, 2)));
  EXPECT_TRUE(covariance_graph(store, 0.0).edges.empty());
  EXPECT_TRUE(covariance_graph(store, 0.025).edges.empty());
}

TEST(Graph, ThreeGeneOracle) {
  Matrix lambda(3, 1);
  lambda << 1.0, 1.0, 0.0;
  DrawStore store;
  store.draws.push_back(make_draw(Matrix::Zero(2, 1), lambda));
  Matrix omega = lambda * lambda.transpose() + Matrix::Identity(3, 3);
  const Vector s = omega.diagonal().cwiseSqrt().cwiseInverse();
  const Matrix corr = s.asDiagonal() * omega * s.asDiagonal();
  const Matrix inv = corr.inverse();
  const double expected = -inv(0, 1) / std::sqrt(inv(0, 0) * inv(1, 1));
  EXPECT_NEAR(expected, 0.5, 1e-12);
  for (auto form : {GraphForm::kCorrelation, GraphForm::kCovariance}) {
    const auto g = covariance_graph(store, 1e-12, form);
    ASSERT_EQ(g.edges.size(), 1u);
    EXPECT_EQ(g.edges[0].j, 0);
    EXPECT_EQ(g.edges[0].k, 1);
    EXPECT_NEAR(g.edges[0].weight, expected, 1e-12);
  }
}

TEST(Graph, SymmetricBoundedThresholdedAndFormIndependent) {
  RngStream rng(8, 0);
  DrawStore store;
  const Eigen::Index p = 12;
  for (int t = 0; t < 25; ++t) {
    Draw d = make_draw(Matrix::Zero(3, 3), random_matrix(p, 3, rng, 0.6));
    for (Eigen::Index j = 0; j < p; ++j) d.sigma2(j) = 0.3 + rng.uniform();
    d.rho(2) = 0;
    d.lambda.col(2).setZero();
    store.draws.push_back(d);
  }
  const auto g = covariance_graph(store, 0.025);
  const auto gc = covariance_graph(store, 0.025, GraphForm::kCovariance);
  EXPECT_LT((g.mean_partial - gc.mean_partial).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(g.mean_partial, g.mean_partial.transpose());
  EXPECT_EQ(g.mean_partial.diagonal().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LE(g.mean_partial.cwiseAbs().maxCoeff(), 1.0);
  ASSERT_FALSE(g.edges.empty());
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    EXPECT_GE(std::abs(g.edges[e].weight), 0.025);
    EXPECT_LT(g.edges[e].j, g.edges[e].k);
    if (e > 0) {
      const auto& a = g.edges[e - 1];
      const auto& b = g.edges[e];
      EXPECT_TRUE(a.j < b.j || (a.j == b.j && a.k < b.k));
    }
  }
  EXPECT_TRUE(covariance_graph(store, 1.0).edges.empty());
  EXPECT_THROW(covariance_graph(store, -0.1), ValidationError);
}

TEST(Predict, ZeroPredictorGivesOnes) {
  Draw d = make_draw(Matrix::Zero(4, 2), Matrix::Zero(3, 2));
  DrawStore store;
  store.draws.push_back(d);
  FlagGrid mask = FlagGrid::Ones(4, 3);
  const auto pred = predict_holdout(store, Covariates::intercepts(4, 3), mask, CountGrid::Constant(4, 3, 3));
  for (double v : pred.mean_prediction) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(pred.mae, 2.0);
}

TEST(Predict, TruthDrawMatchesRoundingOracle) {
  RngStream rng(9, 0);
  const Eigen::Index n = 30, p = 20;
  Draw d = make_draw(random_matrix(n, 2, rng), random_matrix(p, 2, rng, 0.7));
  d.beta = Matrix::Constant(1, p, 1.0);
  const Matrix m = Matrix::Ones(n, 1) * d.beta + d.eta * d.lambda.transpose();
  CountGrid y(n, p);
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < n; ++i) y(i, j) = static_cast<std::int64_t>(std::floor(std::exp(m(i, j) + 0.3 * rng.normal())));
  RngStream mrng(9, 1);
  const FlagGrid mask = mask_holdout(n, p, 0.25, mrng);
  double oracle = 0.0;
  int count = 0;
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      if (mask(i, j)) {
        oracle += std::abs(static_cast<double>(y(i, j)) - std::floor(std::exp(m(i, j))));
        ++count;
      }
  DrawStore store;
  store.draws.push_back(d);
  const auto pred = predict_holdout(store, Covariates::intercepts(n, p), mask, y);
  EXPECT_EQ(count, 150);
  EXPECT_NEAR(pred.mae, oracle / count, 1e-12);

  CountGrid permuted = y;
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      if (mask(i, j)) permuted(i, j) = y(n - 1 - i, j) + 5;
  EXPECT_EQ(predict_holdout(store, Covariates::intercepts(n, p), mask, permuted).mean_prediction, pred.mean_prediction);
}

TEST(Predict, NoiseFlagIsSeededAndDiffers) {
  RngStream rng(10, 0);
  Draw d = make_draw(random_matrix(10, 1, rng), random_matrix(8, 1, rng));
  d.beta = Matrix::Constant(1, 8, 2.0);
  DrawStore store;
  store.draws.push_back(d);
  const FlagGrid mask = FlagGrid::Ones(10, 8);
  const CountGrid y = CountGrid::Constant(10, 8, 7);
  const auto cov = Covariates::intercepts(10, 8);
  const auto plain = predict_holdout(store, cov, mask, y);
  const auto a = predict_holdout(store, cov, mask, y, true, 3);
  const auto b = predict_holdout(store, cov, mask, y, true, 3);
  EXPECT_EQ(a.mean_prediction, b.mean_prediction);
  EXPECT_NE(a.mean_prediction, plain.mean_prediction);
  EXPECT_THROW(predict_holdout(store, cov, FlagGrid::Zero(10, 8), y), ValidationError);
}
