#include "oracles.hpp"
#include "sbayes/distributed.hpp"

#include <gtest/gtest.h>

using namespace sbayes;

namespace {

Dataset gaussian_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  Matrix y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) y.row(i) = (standard_normal_vector(d, rng).array() + shift).matrix().transpose();
  return Dataset(y);
}

WorkerDraws normal_subsets(const std::vector<std::pair<double, double>>& loc_sd, Eigen::Index t, std::uint64_t seed) {
  WorkerDraws wd;
  Rng rng(seed);
  for (const auto& [mu, sd] : loc_sd) {
    Matrix d(t, 1);
    for (Eigen::Index i = 0; i < t; ++i) d(i, 0) = mu + sd * standard_normal_vector(1, rng)[0];
    wd.draws.push_back(d);
  }
  return wd;
}

TunedHmcConfig worker_cfg(int n) { return {0.1, 8, 300, n, 0.6, 0.8}; }

std::vector<std::uint64_t> seeds(int k) {
  std::vector<std::uint64_t> s;
  for (int j = 0; j < k; ++j) s.push_back(1000 + static_cast<std::uint64_t>(j));
  return s;
}

void expect_moments_match(const Matrix& draws, const GaussianPosterior& p) {
  for (Eigen::Index c = 0; c < draws.cols(); ++c) {
    std::vector<double> v(draws.col(c).data(), draws.col(c).data() + draws.rows());
    const auto m = oracle::batch_moments(v);
    EXPECT_LE(std::abs(m.mean - p.mean()[c]), 4 * m.se_mean) << "coordinate " << c;
    EXPECT_LE(std::abs(m.var - p.covariance()(c, c)), 4 * m.se_var) << "coordinate " << c;
  }
}

}  // namespace

// ---------------------------------------------------------------- subset posteriors

TEST(SubsetPosterior, TemperedPriorNaturalParametersAddUp) {
  const auto m = make_gaussian_location(2, gaussian_rows(40, 2, 1, 0.5));
  const auto shards = partition(m.data(), 4, 3);
  GaussianFactor sum{Matrix::Zero(2, 2), Vector::Zero(2), 0.0};
  for (const auto& s : shards) sum += subset_posterior_factor(m, s, SubsetMode::kTemperedPrior, 4);
  const GaussianFactor full = posterior_factor(m);
  EXPECT_LE((sum.precision - full.precision).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((sum.shift - full.shift).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SubsetPosterior, PoweredLikelihoodVarianceMatchesFull) {
  const auto m = make_gaussian_location(1, gaussian_rows(200, 1, 2));
  const double full = conjugate_posterior(m).covariance()(0, 0);
  for (const auto& s : partition(m.data(), 4, 5)) {
    const double v = subset_posterior_factor(m, s, SubsetMode::kPoweredLikelihood, 4).normalized().covariance()(0, 0);
    EXPECT_GE(v / full, 0.8);
    EXPECT_LE(v / full, 1.25);
  }
}

TEST(SubsetChains, SingleSubsetTargetsFullPosterior) {
  const auto m = make_gaussian_location(1, gaussian_rows(50, 1, 3, 1.0));
  for (auto mode : {SubsetMode::kTemperedPrior, SubsetMode::kPoweredLikelihood}) {
    const auto wd = run_subset_chains(m, partition(m.data(), 1, 0), mode, worker_cfg(20000), seeds(1));
    expect_moments_match(wd.draws[0], conjugate_posterior(m));
  }
}

TEST(SubsetChains, OneShotAccessAudit) {
  const auto m = make_gaussian_location(1, gaussian_rows(40, 1, 4));
  const auto shards = partition(m.data(), 4, 2);
  const std::uint64_t full_before = m.data().reads();
  std::vector<std::uint64_t> before;
  for (const auto& s : shards) before.push_back(s.reads());
  const auto wd = run_subset_chains(m, shards, SubsetMode::kPoweredLikelihood, worker_cfg(200), seeds(4), 2);
  EXPECT_EQ(m.data().reads(), full_before);
  for (std::size_t j = 0; j < shards.size(); ++j) EXPECT_GT(shards[j].reads(), before[j]);
  EXPECT_EQ(wd.seeds.size(), 4u);
  EXPECT_EQ(wd.k(), 4);
}

TEST(SubsetChains, DeterministicAcrossThreadCounts) {
  const auto m = make_gaussian_location(1, gaussian_rows(40, 1, 4));
  const auto shards = partition(m.data(), 4, 2);
  const auto a = run_subset_chains(m, shards, SubsetMode::kTemperedPrior, worker_cfg(300), seeds(4), 1);
  const auto b = run_subset_chains(m, shards, SubsetMode::kTemperedPrior, worker_cfg(300), seeds(4), 3);
  for (int j = 0; j < 4; ++j) EXPECT_TRUE(a.draws[static_cast<std::size_t>(j)] == b.draws[static_cast<std::size_t>(j)]);
}

TEST(SubsetChains, DivergingWorkerIsNamed) {
  const auto m = make_gaussian_location(1, gaussian_rows(40, 1, 4));
  TunedHmcConfig bad{30.0, 30, 0, 50, 0.6, 0.8};
  try {
    run_subset_chains(m, partition(m.data(), 2, 1), SubsetMode::kTemperedPrior, bad, seeds(2));
    FAIL() << "expected a divergence error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("subset 0"), std::string::npos);
  }
}

// ---------------------------------------------------------------- combiners

TEST(Consensus, SingleSubsetIsIdentity) {
  const auto wd = normal_subsets({{0.3, 1.0}}, 100, 1);
  EXPECT_TRUE(consensus_gaussian(wd) == wd.draws[0]);
}

TEST(Consensus, RecoversFullPosteriorFromTemperedSubsets) {
  const auto m = make_gaussian_location(2, gaussian_rows(80, 2, 6, 0.7));
  const auto wd =
      run_subset_chains(m, partition(m.data(), 4, 1), SubsetMode::kTemperedPrior, worker_cfg(20000), seeds(4));
  expect_moments_match(consensus_gaussian(wd), conjugate_posterior(m));
}

TEST(Consensus, IdenticalSubsetsGetEqualWeights) {
  const auto m = make_gaussian_location(1, gaussian_rows(20, 1, 7));
  const std::vector<Dataset> shards(4, m.data());
  const auto wd = run_subset_chains(m, shards, SubsetMode::kTemperedPrior, worker_cfg(20000), seeds(4));
  const auto w = consensus_weights(wd);
  double mean = 0;
  for (const auto& wj : w) mean += wj(0, 0) / 4;
  for (const auto& wj : w) EXPECT_LE(std::abs(wj(0, 0) / mean - 1), 0.05);
}

TEST(Consensus, SingularCovarianceAsksForMoreDraws) {
  WorkerDraws wd;
  wd.draws = {Matrix::Constant(10, 1, 2.0), Matrix::Random(10, 1)};
  EXPECT_THROW(consensus_gaussian(wd), NumericError);
}

TEST(QuantileAverage, IdenticalSubsetsGiveSubsetQuantiles) {
  const auto one = normal_subsets({{1.0, 2.0}}, 501, 2);
  WorkerDraws wd;
  wd.draws = {one.draws[0], one.draws[0], one.draws[0]};
  const Vector a = uniform_alpha_grid(50);
  EXPECT_LE((quantile_average(wd, a) - quantile_average(one, a)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(QuantileAverage, TwoGaussiansAverageToMidpoint) {
  const auto wd = normal_subsets({{0.0, 1.0}, {2.0, 1.0}}, 10000, 3);
  // interior grid: below 0.05 the empirical-quantile noise alone approaches the tolerance
  const Vector a = Vector::LinSpaced(91, 0.05, 0.95);
  const Vector q = quantile_average(wd, a);
  double err = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) err = std::max(err, std::abs(q[i] - (1.0 + oracle::norm_quantile(a[i]))));
  EXPECT_LE(err, 0.05);
}

TEST(QuantileAverage, MonotoneAndOneDimensional) {
  const auto wd = normal_subsets({{0.0, 1.0}, {5.0, 0.2}, {-2.0, 3.0}}, 300, 4);
  const Vector q = quantile_average(wd, uniform_alpha_grid(200));
  for (Eigen::Index i = 1; i < q.size(); ++i) EXPECT_GE(q[i], q[i - 1]);
  WorkerDraws two;
  two.draws = {Matrix::Random(10, 2)};
  EXPECT_THROW(quantile_average(two, uniform_alpha_grid(5)), UnsupportedModelError);
  EXPECT_THROW(quantile_average(wd, Vector::Constant(1, 1.0)), InputError);
}

TEST(WassersteinMedian, SingleSubsetIsItself) {
  const auto wd = normal_subsets({{0.5, 1.0}}, 400, 5);
  const auto med = wasserstein_median(wd, uniform_alpha_grid(100));
  EXPECT_LE((med.quantiles - quantile_average(wd, uniform_alpha_grid(100))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(WassersteinMedian, RobustToOutlyingSubset) {
  const auto wd = normal_subsets({{0.0, 1.0}, {0.0, 1.0}, {10.0, 1.0}}, 10000, 6);
  const Vector a = uniform_alpha_grid(1000);
  const auto med = wasserstein_median(wd, a);
  double w2 = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) w2 += std::pow(med.quantiles[i] - oracle::norm_quantile(a[i]), 2);
  EXPECT_LE(std::sqrt(w2 / static_cast<double>(a.size())), 0.05);
  EXPECT_LT(med.subset_weights[2], 0.05);
}

TEST(WassersteinMedian, SymmetricConfigurationCentered) {
  const auto wd = normal_subsets({{-3.0, 1.0}, {0.0, 1.0}, {3.0, 1.0}}, 10000, 7);
  const auto med = wasserstein_median(wd);
  EXPECT_LE(std::abs(med.quantiles.mean()), 0.05);
  EXPECT_NEAR(med.subset_weights.sum(), 1.0, 1e-12);
}

TEST(RecenteredMixture, SingleSubsetIsIdentity) {
  const auto wd = normal_subsets({{0.3, 1.0}}, 100, 8);
  EXPECT_LE((recentered_mixture(wd) - wd.draws[0]).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(RecenteredMixture, MeanIsGrandMean) {
  const auto wd = normal_subsets({{0.0, 1.0}, {4.0, 0.5}, {-1.0, 2.0}}, 333, 9);
  double grand = 0;
  for (const auto& d : wd.draws) grand += d.mean() / 3;
  EXPECT_NEAR(recentered_mixture(wd).mean(), grand, 1e-12);
}

TEST(RecenteredMixture, RecoversFullPosteriorFromPoweredSubsets) {
  const auto m = make_gaussian_location(1, gaussian_rows(200, 1, 10, -0.4));
  const auto wd =
      run_subset_chains(m, partition(m.data(), 4, 2), SubsetMode::kPoweredLikelihood, worker_cfg(20000), seeds(4));
  expect_moments_match(recentered_mixture(wd), conjugate_posterior(m));
}

// ---------------------------------------------------------------- SGLD / DSGLD

TEST(Sgld, ZeroStepsReturnInitialPoint) {
  const auto m = make_gaussian_location(2, gaussian_rows(10, 2, 1));
  SgldConfig cfg;
  cfg.n_steps = 0;
  cfg.init = (Vector(2) << 0.5, -1.0).finished();
  const auto c = sgld_run(m, cfg, 3);
  ASSERT_EQ(c.draws.rows(), 1);
  EXPECT_EQ(c.draws.row(0).transpose(), cfg.init);
}

TEST(Sgld, MinibatchGradientIsUnbiased) {
  Rng rng(2);
  const Matrix x = Matrix::Random(50, 3);
  Vector y(50);
  for (int i = 0; i < 50; ++i) y[i] = uniform01(rng) < 0.5 ? 0.0 : 1.0;
  const auto m = make_logistic_regression(Dataset(x, y), 2.0);
  const Vector theta = (Vector(3) << 0.3, -0.8, 1.1).finished();
  Vector full = m.grad_log_prior(theta);
  for (Eigen::Index n = 0; n < 50; ++n) m.add_datum_grad(theta, n, 1.0, full);
  std::vector<std::vector<double>> comps(3);
  for (int r = 0; r < 10000; ++r) {
    const Vector g = sgld_gradient(m, theta, 5, rng);
    for (int c = 0; c < 3; ++c) comps[static_cast<std::size_t>(c)].push_back(g[c]);
  }
  for (int c = 0; c < 3; ++c) {
    const auto mo = oracle::batch_moments(comps[static_cast<std::size_t>(c)]);
    EXPECT_LE(std::abs(mo.mean - full[c]), 3 * mo.se_mean) << c;
  }
}

TEST(Sgld, FullBatchSmallStepMatchesConjugateMean) {
  const auto m = make_gaussian_location(1, gaussian_rows(20, 1, 11, 1.5));
  SgldConfig cfg;
  cfg.batch_size = 20;
  cfg.schedule = {1e-3, 1.0, 0.0};
  cfg.n_steps = 100000;
  const auto c = sgld_run(m, cfg, 4);
  EXPECT_NEAR(c.draws.bottomRows(90000).mean(), conjugate_posterior(m).mean()[0], 0.05);
}

TEST(Sgld, RejectsInvalidSchedule) {
  const auto m = make_gaussian_location(1, gaussian_rows(5, 1, 1));
  SgldConfig cfg;
  cfg.schedule = {1e-3, 1.0, 0.3};
  EXPECT_THROW(sgld_run(m, cfg, 1), ConfigError);
  cfg.schedule = {1e-3, 1.0, 0.55};
  cfg.batch_size = 6;
  EXPECT_THROW(sgld_run(m, cfg, 1), ConfigError);
}

TEST(Dsgld, SingleSubsetEqualsSgld) {
  const auto m = make_gaussian_location(2, gaussian_rows(30, 2, 12));
  SgldConfig s;
  s.batch_size = 7;
  s.schedule = {1e-2, 10.0, 0.6};
  s.n_steps = 500;
  DsgldConfig d;
  d.p = Vector::Ones(1);
  d.batch_size = 7;
  d.block_len = 13;
  d.schedule = s.schedule;
  d.n_steps = 500;
  const auto a = sgld_run(m, s, 77);
  const auto b = dsgld_run(m, partition(m.data(), 1, 5), d, 77);
  EXPECT_TRUE(a.draws == b.draws);
}

TEST(Dsgld, ShardGradientIsUnbiased) {
  const auto m = make_gaussian_location(2, gaussian_rows(40, 2, 13, 0.8));
  const auto shards = partition(m.data(), 4, 9);
  std::vector<BayesModel> models;
  for (const auto& s : shards) models.push_back(m.with_data(s));
  const Vector p = (Vector(4) << 0.1, 0.2, 0.3, 0.4).finished();
  const Vector theta = (Vector(2) << -0.2, 0.9).finished();
  Vector full = m.grad_log_prior(theta);
  for (Eigen::Index n = 0; n < 40; ++n) m.add_datum_grad(theta, n, 1.0, full);
  Rng rng(3);
  std::discrete_distribution<int> pick(p.data(), p.data() + 4);
  std::vector<std::vector<double>> comps(2);
  for (int r = 0; r < 10000; ++r) {
    const int j = pick(rng);
    const Vector g = dsgld_gradient(models[static_cast<std::size_t>(j)], theta, p[j], 3, rng);
    for (int c = 0; c < 2; ++c) comps[static_cast<std::size_t>(c)].push_back(g[c]);
  }
  for (int c = 0; c < 2; ++c) {
    const auto mo = oracle::batch_moments(comps[static_cast<std::size_t>(c)]);
    EXPECT_LE(std::abs(mo.mean - full[c]), 3 * mo.se_mean) << c;
  }
}

TEST(Dsgld, CommunicationCountIsCompletedBlocks) {
  const auto m = make_gaussian_location(1, gaussian_rows(40, 1, 14));
  DsgldConfig d;
  d.p = Vector::Constant(4, 0.25);
  d.batch_size = 3;
  d.schedule = {1e-3, 1.0, 0.55};
  for (auto [steps, block] : std::vector<std::pair<int, int>>{{100, 10}, {105, 10}, {7, 10}, {0, 3}, {31, 1}}) {
    d.n_steps = steps;
    d.block_len = block;
    const auto r = dsgld_run(m, partition(m.data(), 4, 1), d, 2);
    EXPECT_EQ(r.communication_events, static_cast<std::size_t>(steps / block));
    EXPECT_EQ(r.visits.size(), static_cast<std::size_t>((steps + block - 1) / block));
  }
  d.p = Vector::Constant(4, 0.3);
  EXPECT_THROW(dsgld_run(m, partition(m.data(), 4, 1), d, 2), ConfigError);
}

// ---------------------------------------------------------------- AXDA

TEST(Axda, MarginalKlShrinksWithRho) {
  const auto m = make_gaussian_location(1, gaussian_rows(100, 1, 15, 0.6));
  const auto shards = partition(m.data(), 4, 3);
  const GaussianPosterior exact = conjugate_posterior(m);
  double prev = std::numeric_limits<double>::infinity();
  for (double rho : {1.0, 0.1, 0.01}) {
    const double kl = gaussian_kl(axda_theta_marginal(m, shards, rho), exact);
    EXPECT_LT(kl, prev) << rho;
    prev = kl;
  }
}

TEST(Axda, GibbsThetaMatchesClosedFormMarginal) {
  const auto m = make_gaussian_location(1, gaussian_rows(100, 1, 16, 0.6));
  const auto shards = partition(m.data(), 4, 3);
  const auto run = axda_gibbs(m, shards, 0.5, 200000, 8);
  std::vector<double> v(run.theta.data() + 1000, run.theta.data() + run.theta.rows());
  const auto mo = oracle::batch_moments(v);
  const auto marg = axda_theta_marginal(m, shards, 0.5);
  EXPECT_LE(std::abs(mo.mean - marg.mean()[0]), 4 * mo.se_mean);
  EXPECT_LE(std::abs(mo.var - marg.covariance()(0, 0)), 4 * mo.se_var);
}

TEST(Axda, SmallRhoThetaMeanIsNearlyUnbiased) {
  // lag-1 correlation is about 1 - 1e-5 at this rho, hence the long chain
  const auto m = make_gaussian_location(1, gaussian_rows(100, 1, 19, 0.6));
  const auto run = axda_gibbs(m, partition(m.data(), 4, 1), 1e-3, 20'000'000, 3);
  const double mean = run.theta.col(0).tail(19'000'000).mean();
  EXPECT_LE(std::abs(mean - conjugate_posterior(m).mean()[0]), 0.02);
}

TEST(Axda, SubsetUpdateOrderDoesNotChangeChain) {
  for (Eigen::Index d : {1, 2, 3}) {
    const auto m = make_gaussian_location(d, gaussian_rows(40, d, 17));
    const auto shards = partition(m.data(), 4, 3);
    const auto a = axda_gibbs(m, shards, 0.3, 2000, 5);
    const auto b = axda_gibbs(m, shards, 0.3, 2000, 5, {2, 0, 3, 1});
    EXPECT_TRUE(a.theta == b.theta) << d;
  }
}

TEST(Axda, NonConjugateModelRejected) {
  const auto m = make_logistic_regression(Dataset(Matrix::Zero(4, 1), Vector::Zero(4)), 1.0);
  EXPECT_THROW(axda_gibbs(m, partition(m.data(), 2, 0), 0.1, 10, 0), UnsupportedModelError);
}

// ---------------------------------------------------------------- TV diagnostic

TEST(TvBound, SelfDistanceIsZero) { EXPECT_NEAR(gaussian_tv_1d(0.3, 2.0, 0.3, 2.0), 0.0, 1e-8); }

TEST(TvBound, KnownDistanceBetweenShiftedGaussians) {
  // TV(N(0,1), N(d,1)) = 2 Phi(d/2) - 1
  EXPECT_NEAR(gaussian_tv_1d(0.0, 1.0, 1.0, 1.0), 2 * oracle::norm_cdf(0.5) - 1, 1e-8);
}

TEST(TvBound, SingleSubsetHasZeroMleGap) {
  const auto m = make_gaussian_location(1, gaussian_rows(30, 1, 18));
  const auto r = tv_bound_check(Matrix::Random(50, 1), m, partition(m.data(), 1, 0));
  EXPECT_EQ(r.mle_gap, 0.0);
}

TEST(TvBound, DeskScaleReportWithinSlack) {
  const auto m = make_gaussian_location(1, gaussian_rows(10000, 1, 20, 0.3));
  const auto shards = partition(m.data(), 10, 4);
  const auto wd = run_subset_chains(m, shards, SubsetMode::kPoweredLikelihood, worker_cfg(4000), seeds(10));
  const auto r = tv_bound_check(recentered_mixture(wd), m, shards);
  EXPECT_GE(r.tv_estimate, 0.0);
  EXPECT_LE(r.tv_estimate, r.mle_gap + 0.05);
}

TEST(TvBound, MultidimensionalInputRejected) {
  const auto m = make_gaussian_location(2, gaussian_rows(20, 2, 21));
  EXPECT_THROW(tv_bound_check(Matrix::Random(10, 2), m, partition(m.data(), 2, 0)), UnsupportedModelError);
}
