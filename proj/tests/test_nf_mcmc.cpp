#include "oracles.hpp"
#include "sbayes/adapt.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace sbayes;

namespace {

TargetModel bimodal() {
  return make_gaussian_mixture_target({Vector::Constant(1, -4.0), Vector::Constant(1, 4.0)}, Vector::Constant(2, 0.5),
                                      1.0);
}

std::vector<double> coordinate(const Matrix& draws, Eigen::Index j, Eigen::Index burn = 0) {
  std::vector<double> v;
  for (Eigen::Index t = burn; t < draws.rows(); ++t) v.push_back(draws(t, j));
  return v;
}

void expect_standard_normal_moments(const Matrix& draws, Eigen::Index burn) {
  for (Eigen::Index j = 0; j < draws.cols(); ++j) {
    const auto m = oracle::batch_moments(coordinate(draws, j, burn));
    EXPECT_LE(std::abs(m.mean), 4 * m.se_mean) << "coordinate " << j;
    EXPECT_LE(std::abs(m.var - 1.0), 4 * m.se_var) << "coordinate " << j;
  }
}

Chain run(const AnyKernel& k, const TargetModel& t, std::int64_t n, std::uint64_t seed, Vector x0 = {}) {
  if (x0.size() == 0) x0 = Vector::Zero(t.dim);
  ChainState s = ChainState::start(t, x0, seed);
  return run_chain(k, t, s, n);
}

ComposedFlow fit_flow_to_bimodal(std::size_t k, int iters, std::uint64_t seed) {
  Rng rng(seed);
  ComposedFlow f = ComposedFlow::identity_random_directions(1, k, 0.1, rng);
  Adam adam;
  Vector p = f.params();
  for (int it = 0; it < iters; ++it) {
    Matrix b(256, 1);
    for (int i = 0; i < 256; ++i) b(i, 0) = (uniform01(rng) < 0.5 ? -4 : 4) + standard_normal_vector(1, rng)[0];
    p = adam.step(p, forward_kl_loss(f, b).grad);
    f = ComposedFlow::from_params(1, k, p);
  }
  return f;
}

}  // namespace

// ---------------------------------------------------------------- independent flow kernel

TEST(IndependentKernel, ExactProposalAlwaysAccepts) {
  const auto t = make_standard_normal_target(2);
  const Chain c = run(IndependentFlowKernel{ComposedFlow::identity(2, 3)}, t, 10000, 4);
  EXPECT_EQ(c.acceptance_rate(), 1.0);
  for (const auto& r : c.records) EXPECT_NEAR(r.log_alpha, 0.0, 1e-12);
}

TEST(IndependentKernel, ChainMeanMatchesTarget) {
  const auto t = make_standard_normal_target(1);
  const Chain c = run(IndependentFlowKernel{ComposedFlow::identity(1, 2)}, t, 100000, 5);
  const auto m = oracle::batch_moments(coordinate(c.draws, 0));
  EXPECT_LE(std::abs(m.mean), 4 * m.se_mean);
}

TEST(IndependentKernel, ReplayIsBitExact) {
  const auto t = bimodal();
  Rng rng(3);
  const IndependentFlowKernel k{ComposedFlow::identity_random_directions(1, 4, 0.7, rng)};
  const Chain a = run(k, t, 2000, 11, Vector::Constant(1, 1.0));
  const Chain b = run(k, t, 2000, 11, Vector::Constant(1, 1.0));
  EXPECT_TRUE(a.draws == b.draws);
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].log_alpha, b.records[i].log_alpha);
}

TEST(IndependentKernel, CachedAndDirectLogAcceptAgree) {
  const auto t = bimodal();
  Rng rng(8);
  const IndependentFlowKernel k{ComposedFlow::identity_random_directions(1, 4, 0.7, rng)};
  ChainState s = ChainState::start(t, Vector::Constant(1, 0.3), 21);
  for (int i = 0; i < 500; ++i) {
    Rng r1 = s.rng;
    const Proposal p = propose(AnyKernel{k}, t, s, r1);
    const double direct = (-t.potential(p.x) + k.flow.log_density(s.x)) - (-t.potential(s.x) + k.flow.log_density(p.x));
    EXPECT_NEAR(p.log_alpha, direct, 1e-12);
    mh_step(k, t, s);
    EXPECT_NEAR(s.potential, t.potential(s.x), 1e-12);
  }
}

TEST(IndependentKernel, NonFiniteRatioIsRejectedAndFlagged) {
  TargetModel t = make_standard_normal_target(1);
  t.potential = [](const Vector& x) { return x[0] > 0 ? std::numeric_limits<double>::infinity() : 0.5 * x[0] * x[0]; };
  ChainState s = ChainState::start(t, Vector::Constant(1, -1.0), 2);
  int flagged = 0;
  for (int i = 0; i < 200; ++i) {
    const StepRecord r = mh_step(IndependentFlowKernel{ComposedFlow::identity(1, 1)}, t, s);
    flagged += r.nonfinite;
    if (r.nonfinite) {
      EXPECT_FALSE(r.accepted);
    }
    EXPECT_LE(s.x[0], 0.0);
  }
  EXPECT_GT(flagged, 50);
}

// ---------------------------------------------------------------- HMC and MALA

TEST(Hmc, TinyStepFreezesDynamics) {
  const auto t = bimodal();
  Rng rng(1);
  const Vector x = Vector::Constant(1, 1.3);
  const Proposal p = hmc_propose(HmcKernel(1e-6, 1), t, x, t.potential(x), rng);
  EXPECT_NEAR(p.x[0], x[0], 1e-5);
  EXPECT_NEAR(p.log_alpha, 0.0, 1e-6);
}

TEST(Hmc, QuadraticLeapfrogMatchesScalarRecurrence) {
  const auto t = make_standard_normal_target(1);
  const double eps = 0.3;
  double x = 0.7, v = -1.1;
  for (int l = 0; l < 7; ++l) {
    v = v - 0.5 * eps * x;
    x = x + eps * v;
    v = v - 0.5 * eps * x;
  }
  const PhaseState end = leapfrog(t, {Vector::Constant(1, 0.7), Vector::Constant(1, -1.1)}, eps, 7);
  EXPECT_EQ(end.x[0], x);
  EXPECT_EQ(end.v[0], v);
}

TEST(Hmc, NegatedMomentumRetracesTrajectory) {
  const auto t = bimodal();
  const PhaseState start{Vector::Constant(1, 2.2), Vector::Constant(1, 0.9)};
  PhaseState end = leapfrog(t, start, 0.2, 25);
  end.v = -end.v;
  const PhaseState back = leapfrog(t, end, 0.2, 25);
  EXPECT_NEAR(back.x[0], start.x[0], 1e-10);
  EXPECT_NEAR(-back.v[0], start.v[0], 1e-10);
}

TEST(Hmc, DivergentProposalIsRejected) {
  const auto t = make_standard_normal_target(1);
  ChainState s = ChainState::start(t, Vector::Constant(1, 1.0), 7);
  const StepRecord r = mh_step(HmcKernel(50.0, 20), t, s);
  EXPECT_TRUE(r.divergent);
  EXPECT_FALSE(r.accepted);
  EXPECT_EQ(s.x[0], 1.0);
}

TEST(Hmc, InvalidParametersRejected) {
  EXPECT_THROW(HmcKernel(0.0, 3), ConfigError);
  EXPECT_THROW(HmcKernel(0.1, 0), ConfigError);
  EXPECT_THROW(MalaKernel(-1.0), ConfigError);
}

TEST(Mala, MatchesSingleStepHmcProposal) {
  const auto t = bimodal();
  const MalaKernel mala(0.6);
  const HmcKernel hmc(0.6, 1);
  int matched = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Vector x = Vector::Constant(1, -3.0 + 0.03 * static_cast<double>(seed));
    Rng r1(seed), r2(seed);
    const Proposal pm = mala_propose(mala, t, x, t.potential(x), r1);
    const Proposal ph = hmc_propose(hmc, t, x, t.potential(x), r2);
    if (std::abs(pm.x[0] - ph.x[0]) > 1e-12) continue;  // HMC drew the reverse direction
    ++matched;
    EXPECT_NEAR(pm.log_alpha, ph.log_alpha, 1e-10);
  }
  EXPECT_GT(matched, 60);
}

// ---------------------------------------------------------------- augmented HMC

TEST(AugmentedHmc, ZeroMapsReproduceHmcBitExactly) {
  const auto t = bimodal();
  const HmcKernel base(0.25, 8);
  const Chain a = run(base, t, 3000, 99, Vector::Constant(1, 3.0));
  const Chain b = run(AugmentedHmcKernel::zero(base, 1), t, 3000, 99, Vector::Constant(1, 3.0));
  EXPECT_TRUE(a.draws == b.draws);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].log_alpha, b.records[i].log_alpha);
    EXPECT_EQ(a.records[i].accepted, b.records[i].accepted);
  }
}

TEST(AugmentedHmc, LogJacobianMatchesFiniteDifferences) {
  const auto t = make_gaussian_mixture_target({Vector::Constant(2, 1.0), Vector::Constant(2, -1.0)},
                                              Vector::Constant(2, 0.5), 1.5);
  Rng rng(12);
  AugmentedHmcKernel k = AugmentedHmcKernel::zero(HmcKernel(0.3, 3), 2);
  k = k.with_params(0.3 * standard_normal_vector(k.params().size(), rng));
  for (int dir : {1, -1}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Vector x = standard_normal_vector(2, rng), v = standard_normal_vector(2, rng);
      auto map = [&](const oracle::Vec& xv) {
        const auto out = augmented_map(k, t, {xv.head(2), xv.tail(2)}, dir);
        oracle::Vec r(4);
        r << out.end.x, out.end.v;
        return r;
      };
      oracle::Vec xv(4);
      xv << x, v;
      const double fd = std::log(std::abs(oracle::fd_jacobian(map, xv).determinant()));
      EXPECT_NEAR(augmented_map(k, t, {x, v}, dir).logdet, fd, 1e-4);
    }
  }
}

TEST(AugmentedHmc, InverseDirectionUndoesForward) {
  const auto t = bimodal();
  Rng rng(5);
  AugmentedHmcKernel k = AugmentedHmcKernel::zero(HmcKernel(0.2, 5), 1);
  k = k.with_params(0.4 * standard_normal_vector(k.params().size(), rng));
  const PhaseState s{Vector::Constant(1, 1.7), Vector::Constant(1, -0.4)};
  const auto fwd = augmented_map(k, t, s, 1);
  const auto back = augmented_map(k, t, fwd.end, -1);
  EXPECT_NEAR(back.end.x[0], s.x[0], 1e-10);
  EXPECT_NEAR(back.end.v[0], s.v[0], 1e-10);
  EXPECT_NEAR(back.logdet, -fwd.logdet, 1e-10);
}

TEST(AugmentedHmc, SmallRandomMapsPreserveStandardNormal) {
  const auto t = make_standard_normal_target(1);
  Rng rng(41);
  AugmentedHmcKernel k = AugmentedHmcKernel::zero(HmcKernel(0.4, 3), 1);
  k = k.with_params(0.2 * standard_normal_vector(k.params().size(), rng));
  const Chain c = run(k, t, 200000, 17);
  const auto m = oracle::batch_moments(coordinate(c.draws, 0, 1000));
  EXPECT_LE(std::abs(m.mean), 4 * m.se_mean);
  EXPECT_GT(c.acceptance_rate(), 0.2);
}

TEST(AugmentedHmc, PerceptronParameterLayout) {
  Perceptron p(3);
  EXPECT_EQ(p.params().size(), 16 * 3 + 16 + 3 * 16 + 3);
  EXPECT_EQ(p(Vector::Ones(3)), Vector::Zero(3));
  Vector q = Vector::Zero(p.params().size());
  q.tail(3) << 1, 2, 3;
  EXPECT_EQ(Perceptron(3, q)(Vector::Ones(3)), Vector((Vector(3) << 1, 2, 3).finished()));
}

// ---------------------------------------------------------------- involutive kernel

TEST(InvolutiveKernel, IdentityFlowNeverMoves) {
  const auto t = bimodal();
  const InvolutiveFlowKernel k(ComposedFlow::identity(2, 2), 1);
  const Chain c = run(k, t, 500, 3, Vector::Constant(1, 0.8));
  EXPECT_EQ(c.acceptance_rate(), 1.0);
  EXPECT_TRUE((c.draws.array() == 0.8).all());
}

TEST(InvolutiveKernel, RejectsVolumeChangingFlow) {
  const ComposedFlow f(2, {{Vector::Constant(2, 0.5), Vector::Constant(2, 1.0), 0.0}});
  EXPECT_THROW(InvolutiveFlowKernel(f, 1), ConfigError);
  EXPECT_THROW(InvolutiveFlowKernel(ComposedFlow::identity(1, 1), 1), ConfigError);
}

TEST(InvolutiveKernel, ProposalIsSymmetricBetweenCells) {
  // x uniform on [-1, 1); flux from [-1, 0) to [0, 1) must equal the reverse flux.
  Rng frng(2);
  const InvolutiveFlowKernel k(make_shear_flow(1, 1, 3, 0.6, frng), 1);
  const auto t = make_standard_normal_target(1);
  Rng rng(77);
  const int n = 100000;
  std::vector<double> ab(n, 0.0), ba(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const Vector x = Vector::Constant(1, 2 * uniform01(rng) - 1);
    const double xp = k.propose(t, x, t.potential(x), rng).x[0];
    if (x[0] < 0 && xp >= 0 && xp < 1) ab[i] = 1;
    if (x[0] >= 0 && xp < 0 && xp >= -1) ba[i] = 1;
  }
  std::vector<double> diff(n);
  for (int i = 0; i < n; ++i) diff[i] = ab[i] - ba[i];
  const auto m = oracle::batch_moments(diff);
  EXPECT_GT(std::accumulate(ab.begin(), ab.end(), 0.0), 1000);
  EXPECT_LE(std::abs(m.mean), 3 * m.se_mean);
}

TEST(InvolutiveKernel, PreservesStandardNormal) {
  Rng frng(9);
  const InvolutiveFlowKernel k(make_shear_flow(2, 1, 4, 0.8, frng), 2);
  const Chain c = run(k, make_standard_normal_target(2), 100000, 13);
  expect_standard_normal_moments(c.draws, 1000);
}

// ---------------------------------------------------------------- mixtures

TEST(MixtureKernel, ScheduleIsDeterministicAlternation) {
  const MixtureKernel m(MalaKernel(0.5), IndependentFlowKernel{ComposedFlow::identity(1, 1)}, 10);
  std::vector<std::int64_t> globals;
  for (std::int64_t s = 0; s < 40; ++s)
    if (m.is_global_step(s)) globals.push_back(s);
  EXPECT_EQ(globals, (std::vector<std::int64_t>{10, 21, 32}));
  EXPECT_THROW(MixtureKernel(MalaKernel(0.5), IndependentFlowKernel{ComposedFlow::identity(1, 1)}, 0), ConfigError);
}

TEST(MixtureKernel, IdentityFlowMixtureEqualsIndependentChain) {
  const auto t = bimodal();
  const IndependentFlowKernel ind{ComposedFlow::identity(1, 2)};
  const Chain a = run(MixtureKernel(ind, ind, 1), t, 3000, 8, Vector::Constant(1, 2.0));
  const Chain b = run(ind, t, 3000, 8, Vector::Constant(1, 2.0));
  EXPECT_TRUE(a.draws == b.draws);
}

TEST(MixtureKernel, PrefitFlowReachesBothModesWhereMalaDoesNot) {
  const auto t = bimodal();
  const IndependentFlowKernel global{fit_flow_to_bimodal(8, 800, 3)};
  const Vector start = Vector::Constant(1, -4.0);
  const Chain mix = run(MixtureKernel(MalaKernel(0.9), global, 10), t, 10000, 21, start);
  const Chain mala = run(MalaKernel(0.9), t, 10000, 21, start);
  auto frac_pos = [](const Chain& c) { return (c.draws.array() > 0).cast<double>().mean(); };
  EXPECT_GE(frac_pos(mix), 0.01);
  EXPECT_GE(1 - frac_pos(mix), 0.01);
  EXPECT_LT(frac_pos(mala), 0.01);
}

TEST(Invariance, EveryKernelPreservesStandardNormal) {
  const auto t = make_standard_normal_target(2);
  Rng rng(31);
  AugmentedHmcKernel aug = AugmentedHmcKernel::zero(HmcKernel(0.4, 4), 2);
  aug = aug.with_params(0.15 * standard_normal_vector(aug.params().size(), rng));
  const IndependentFlowKernel nf{ComposedFlow::identity_random_directions(2, 3, 0.5, rng)};
  const std::vector<std::pair<std::string, AnyKernel>> kernels = {
      {"independent", nf},
      {"involutive", InvolutiveFlowKernel(make_shear_flow(2, 2, 4, 0.7, rng), 2)},
      {"hmc", HmcKernel(0.4, 6)},
      {"mala", MalaKernel(0.8)},
      {"mixture", MixtureKernel(MalaKernel(0.8), nf, 10)},
      {"augmented", aug}};
  std::uint64_t seed = 100;
  for (const auto& [name, k] : kernels) {
    SCOPED_TRACE(name);
    const Chain c = run(k, t, 101000, ++seed);
    expect_standard_normal_moments(c.draws, 1000);
  }
}

// ---------------------------------------------------------------- losses

TEST(ForwardKl, GradientNearZeroAtSelfConsistentFlow) {
  Rng rng(4);
  const ComposedFlow f = ComposedFlow::identity_random_directions(2, 3, 0.0, rng);
  const FlowSample s = f.sample(4000, 6);
  const Vector g = forward_kl_loss(f, s.draws).grad;
  Matrix per(s.draws.rows(), g.size());
  for (Eigen::Index i = 0; i < s.draws.rows(); ++i) per.row(i) = f.param_grad_neg_logdensity(s.draws.row(i)).transpose();
  const Vector mean = per.colwise().mean();
  for (Eigen::Index j = 0; j < g.size(); ++j) {
    const double sd = std::sqrt((per.col(j).array() - mean[j]).square().sum() / (per.rows() - 1));
    EXPECT_LE(std::abs(g[j]), 3 * sd / std::sqrt(static_cast<double>(per.rows())) + 1e-12) << j;
  }
}

TEST(ForwardKl, AdamDecreasesLossOnFixedBuffer) {
  Rng rng(2);
  ComposedFlow f = ComposedFlow::identity_random_directions(1, 4, 0.1, rng);
  Matrix buf(512, 1);
  for (Eigen::Index i = 0; i < buf.rows(); ++i) buf(i, 0) = 2.0 + 0.5 * standard_normal_vector(1, rng)[0];
  Adam adam;
  Vector p = f.params();
  double prev = forward_kl_loss(f, buf).value;
  int ok = 0;
  for (int it = 0; it < 100; ++it) {
    p = adam.step(p, forward_kl_loss(f, buf).grad);
    f = ComposedFlow::from_params(1, 4, p);
    const double v = forward_kl_loss(f, buf).value;
    ok += v <= prev;
    prev = v;
  }
  EXPECT_GE(ok, 95);
}

TEST(ForwardKl, DuplicatedBufferLeavesLossUnchanged) {
  Rng rng(7);
  const ComposedFlow f = ComposedFlow::identity_random_directions(2, 3, 0.6, rng);
  const Matrix b = f.sample(64, 1).draws;
  Matrix bb(128, 2);
  bb << b, b;
  const auto l1 = forward_kl_loss(f, b), l2 = forward_kl_loss(f, bb);
  EXPECT_NEAR(l1.value, l2.value, 1e-12);
  EXPECT_LE((l1.grad - l2.grad).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Esjd, StaticKernelGivesSentinel) {
  const auto t = make_standard_normal_target(1);
  const Matrix buf = Matrix::Random(20, 1);
  const EsjdValue v = esjd_loss(InvolutiveFlowKernel(ComposedFlow::identity(2, 1), 1), t, buf, 1.0, 3);
  EXPECT_TRUE(v.degenerate);
  EXPECT_TRUE(std::isinf(v.value));
  EXPECT_THROW(esjd_loss(HmcKernel(0.1, 1), t, buf, 0.0, 3), ConfigError);
}

TEST(Esjd, LossVanishesWhenLagEqualsLambda) {
  const auto t = make_standard_normal_target(1);
  const Matrix buf = ComposedFlow::identity(1, 1).sample(500, 2).draws;
  const EsjdValue v = esjd_loss(HmcKernel(0.5, 3), t, buf, 1.0, 9);
  EXPECT_NEAR(esjd_loss(HmcKernel(0.5, 3), t, buf, v.lag, 9).value, 0.0, 1e-12);
}

TEST(Esjd, MatchesBruteForceDoubleIntegral) {
  // exact independent proposal: every move is accepted, so the lag is E (x - y)^2 over independent pairs
  const auto t = make_standard_normal_target(1);
  const IndependentFlowKernel k{ComposedFlow::identity(1, 1)};
  Rng rng(10);
  const Matrix buf = ComposedFlow::identity(1, 1).sample(200000, 4).draws;
  const double lag = esjd_loss(k, t, buf, 1.0, 5).lag;
  double brute = 0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const double x = standard_normal_vector(1, rng)[0], y = standard_normal_vector(1, rng)[0];
    brute += (x - y) * (x - y);
  }
  brute /= n;
  EXPECT_LE(std::abs(lag - brute) / brute, 0.02);
}

TEST(Esjd, InvariantUnderBufferPermutation) {
  const auto t = bimodal();
  Rng rng(3);
  Matrix buf(300, 1);
  for (Eigen::Index i = 0; i < buf.rows(); ++i) buf(i, 0) = 4 * standard_normal_vector(1, rng)[0];
  std::vector<Eigen::Index> perm(300);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix shuffled(300, 1);
  for (Eigen::Index i = 0; i < 300; ++i) shuffled.row(i) = buf.row(perm[static_cast<std::size_t>(i)]);
  const auto a = esjd_loss(HmcKernel(0.3, 4), t, buf, 2.0, 17);
  const auto b = esjd_loss(HmcKernel(0.3, 4), t, shuffled, 2.0, 17);
  EXPECT_NEAR(a.lag, b.lag, 1e-12 * a.lag);
}

// ---------------------------------------------------------------- adaptation

TEST(Adapt, ZeroRoundsLeaveKernelUnchanged) {
  Rng rng(1);
  const IndependentFlowKernel k{ComposedFlow::identity_random_directions(1, 3, 0.4, rng)};
  const auto r = adapt(k, make_standard_normal_target(1), LossSpec::forward_kl(), 0, {});
  EXPECT_EQ(kernel_params(r.kernel), kernel_params(k));
  EXPECT_TRUE(r.loss_trace.empty());
}

TEST(Adapt, ForwardKlRequiresFlowDensityKernel) {
  EXPECT_THROW(adapt(HmcKernel(0.1, 2), make_standard_normal_target(1), LossSpec::forward_kl(), 1, {}), ConfigError);
  EXPECT_THROW(LossSpec::esjd(0.0), ConfigError);
}

TEST(Adapt, ForwardKlFitsStandardNormal) {
  const auto t = make_standard_normal_target(1);
  Rng rng(6);
  std::vector<PlanarLayer> ls;
  for (int i = 0; i < 4; ++i) ls.push_back({Vector::Constant(1, 0.8), Vector::Constant(1, 1.0), 0.5 * i - 0.7});
  const IndependentFlowKernel k{ComposedFlow(1, ls)};
  AdaptConfig cfg;
  cfg.seed = 12;
  cfg.learning_rate = 0.02;
  cfg.steps_per_round = 20;
  const auto r = adapt(MixtureKernel(MalaKernel(1.0), k, 10), t, LossSpec::forward_kl(), 600, cfg);
  const ComposedFlow& f = *density_flow(r.kernel);
  const double kl = oracle::simpson(
      [&](double x) {
        const double lp = -0.5 * x * x - 0.5 * kLog2Pi;
        return std::exp(lp) * (lp - f.log_density(Vector::Constant(1, x)));
      },
      -12, 12, 20000);
  EXPECT_LE(kl, 0.05);
  EXPECT_EQ(r.loss_trace.size(), 600u);
  EXPECT_TRUE(kernel_params(r.kernel).allFinite());
}

TEST(Adapt, EsjdImprovesHmcStepSize) {
  const auto t = make_standard_normal_target(1);
  AdaptConfig cfg;
  cfg.seed = 3;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 128;
  const HmcKernel k(0.05, 3);
  const auto r = adapt(k, t, LossSpec::esjd(1.0), 60, cfg);
  EXPECT_GT(std::get<HmcKernel>(r.kernel).eps, 2 * k.eps);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
}
