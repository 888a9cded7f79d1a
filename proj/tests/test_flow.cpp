#include "oracles.hpp"
#include "sbayes/flow.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace sbayes;

namespace {

ComposedFlow random_flow(Eigen::Index d, std::size_t k, Rng& rng, double scale = 0.8) {
  std::vector<PlanarLayer> ls;
  for (std::size_t i = 0; i < k; ++i)
    ls.push_back({scale * standard_normal_vector(d, rng), scale * standard_normal_vector(d, rng),
                  standard_normal_vector(1, rng)[0]});
  return ComposedFlow(d, std::move(ls));
}

}  // namespace

TEST(FlowForward, ZeroScaleIsIdentity) {
  Rng rng(1);
  std::vector<PlanarLayer> ls(3, {Vector::Zero(2), Vector::Zero(2), 0.0});
  ls[1].w = standard_normal_vector(2, rng);
  ls[2].b = 0.7;
  const ComposedFlow f(2, ls);
  const Vector z = standard_normal_vector(2, rng);
  const auto out = f.forward(z);
  EXPECT_EQ(out.y, z);
  EXPECT_EQ(out.logdet, 0.0);
}

TEST(FlowForward, HandEvaluatedSingleLayer) {
  const ComposedFlow f(1, {{Vector::Ones(1), Vector::Ones(1), 0.0}});
  const auto out = f.forward(Vector::Zero(1));
  EXPECT_EQ(out.y[0], 0.0);
  EXPECT_NEAR(out.logdet, std::log(2.0), 1e-15);
}

TEST(FlowForward, LogdetMatchesFiniteDifferenceJacobian) {
  Rng rng(42);
  for (Eigen::Index d = 1; d <= 5; ++d) {
    for (int rep = 0; rep < 5; ++rep) {
      const auto f = random_flow(d, 2, rng);
      const Vector z = standard_normal_vector(d, rng);
      const Matrix j = oracle::fd_jacobian([&](const Vector& v) { return f.forward(v).y; }, z);
      EXPECT_NEAR(f.forward(z).logdet, std::log(std::abs(j.determinant())), 1e-4);
    }
  }
}

TEST(FlowInverse, IdentityAndFixedPoint) {
  const auto id = ComposedFlow::identity(3, 4);
  const Vector y = Vector::LinSpaced(3, -1, 2);
  EXPECT_EQ(id.inverse(y), y);
  const ComposedFlow f(1, {{Vector::Ones(1), Vector::Ones(1), 0.0}});
  EXPECT_NEAR(f.inverse(Vector::Zero(1))[0], 0.0, 1e-15);
}

TEST(FlowInverse, RoundTripProperty) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index d = 1 + rep % 4;
    const auto f = random_flow(d, 1 + rep % 6, rng, 1.5);
    for (int probe = 0; probe < 100; ++probe) {
      const Vector z = 2.0 * standard_normal_vector(d, rng);
      ASSERT_LE((f.inverse(f.forward(z).y) - z).cwiseAbs().maxCoeff(), 1e-8);
      const Vector y = 2.0 * standard_normal_vector(d, rng);
      ASSERT_LE((f.forward(f.inverse(y)).y - y).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(FlowDensity, IdentityAtOrigin) {
  EXPECT_NEAR(ComposedFlow::identity(1, 2).log_density(Vector::Zero(1)), -0.5 * std::log(2 * M_PI), 1e-15);
}

TEST(FlowDensity, OneDimensionalPushforwardIntegratesToOne) {
  Rng rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    const auto f = random_flow(1, 4, rng, 1.0);
    const double z = oracle::simpson([&](double y) { return std::exp(f.log_density(Vector::Constant(1, y))); },
                                     -20, 20, 200000);
    EXPECT_NEAR(z, 1.0, 1e-6);
  }
}

TEST(FlowDensity, MonteCarloEntropyConsistentAcrossSeeds) {
  Rng rng(9);
  const auto f = random_flow(2, 3, rng);
  auto estimate = [&](std::uint64_t seed) {
    const auto s = f.sample(10000, seed);
    Vector ld(s.draws.rows());
    for (Eigen::Index i = 0; i < ld.size(); ++i) ld[i] = f.log_density(s.draws.row(i).transpose());
    const double mean = ld.mean();
    const double se = std::sqrt((ld.array() - mean).square().sum() / (ld.size() - 1) / ld.size());
    return std::pair{mean, se};
  };
  const auto [m1, s1] = estimate(1);
  const auto [m2, s2] = estimate(2);
  EXPECT_LE(std::abs(m1 - m2), 3 * std::sqrt(s1 * s1 + s2 * s2));
}

TEST(FlowSample, IdentityFlowIsStandardNormal) {
  const auto s = ComposedFlow::identity(2, 3).sample(40000, 5);
  const double n = 40000;
  for (Eigen::Index c = 0; c < 2; ++c) {
    const Vector col = s.draws.col(c);
    EXPECT_LE(std::abs(col.mean()), 4 / std::sqrt(n));
    const double var = (col.array() - col.mean()).square().sum() / (n - 1);
    EXPECT_LE(std::abs(var - 1.0), 4 * std::sqrt(2.0 / n));
  }
}

TEST(FlowSample, DeterministicAndSelfConsistent) {
  Rng rng(21);
  const auto f = random_flow(3, 4, rng);
  const auto a = f.sample(500, 77), b = f.sample(500, 77);
  EXPECT_EQ(a.draws, b.draws);
  EXPECT_EQ(a.logdensities, b.logdensities);
  double worst = 0;
  for (Eigen::Index i = 0; i < 500; ++i)
    worst = std::max(worst, std::abs(a.logdensities[i] - f.log_density(a.draws.row(i).transpose())));
  EXPECT_LE(worst, 1e-10);
}

TEST(FlowParamGrad, ZeroScaleSymmetricBatchHasZeroOffsetGradient) {
  Rng rng(2);
  std::vector<PlanarLayer> ls(2, {Vector::Zero(2), Vector::Zero(2), 0.3});
  for (auto& l : ls) l.w = standard_normal_vector(2, rng);
  const ComposedFlow f(2, ls);
  Matrix batch(2, 2);
  const Vector y = standard_normal_vector(2, rng);
  batch.row(0) = y.transpose();
  batch.row(1) = -y.transpose();
  const Vector g = f.param_grad_neg_logdensity(batch);
  EXPECT_EQ(g[4], 0.0);
  EXPECT_EQ(g[9], 0.0);
}

TEST(FlowParamGrad, MatchesFiniteDifferences) {
  Rng rng(13);
  for (int rep = 0; rep < 10; ++rep) {
    // rep >= 5 uses large scales so some layers run through the invertibility projection
    const auto f = random_flow(2, 2, rng, rep < 5 ? 0.7 : 2.0);
    Matrix batch(8, 2);
    for (Eigen::Index i = 0; i < 8; ++i) batch.row(i) = 1.5 * standard_normal_vector(2, rng).transpose();
    const Vector p = f.params();
    auto loss = [&](const Vector& q) {
      const auto g = ComposedFlow::from_params(2, 2, q);
      double s = 0;
      for (Eigen::Index i = 0; i < 8; ++i) s -= g.log_density(batch.row(i).transpose());
      return s / 8;
    };
    EXPECT_LE(oracle::rel_err(f.param_grad_neg_logdensity(batch), oracle::fd_gradient(loss, p)), 1e-4) << rep;
  }
}

TEST(FlowParamGrad, BatchGradientIsMeanOfPointGradients) {
  Rng rng(17);
  const auto f = random_flow(3, 3, rng);
  Matrix batch(6, 3);
  Vector mean = Vector::Zero(ComposedFlow::param_count(3, 3));
  for (Eigen::Index i = 0; i < 6; ++i) {
    batch.row(i) = standard_normal_vector(3, rng).transpose();
    mean += f.param_grad_neg_logdensity(batch.row(i)) / 6.0;
  }
  EXPECT_LE((f.param_grad_neg_logdensity(batch) - mean).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ProjectInvertible, OrthogonalLayerMapsToSoftplusOffset) {
  PlanarLayer l{Vector(2), Vector(2), 0.0};
  l.a << 1.0, 0.0;
  l.w << 0.0, 2.0;
  const auto p = project_invertible(l);
  EXPECT_NEAR(p.w.dot(p.a), -1.0 + std::log(2.0), 1e-15);
}

TEST(ProjectInvertible, ViolatingLayersBecomeInvertible) {
  Rng rng(31);
  for (int rep = 0; rep < 200; ++rep) {
    PlanarLayer l{standard_normal_vector(3, rng), standard_normal_vector(3, rng), 0.0};
    const double u = l.w.dot(l.a);
    l.a -= ((5.0 + u) / l.w.squaredNorm()) * l.w;  // now w'a = -5
    ASSERT_NEAR(l.w.dot(l.a), -5.0, 1e-9);
    EXPECT_GE(project_invertible(l).w.dot(project_invertible(l).a), -1.0);
  }
}

TEST(ProjectInvertible, ZeroDirectionUnchanged) {
  const PlanarLayer l{Vector::Constant(2, -3.0), Vector::Zero(2), 0.5};
  const auto p = project_invertible(l);
  EXPECT_EQ(p.a, l.a);
  EXPECT_EQ(p.b, l.b);
}

TEST(FlowCheckpoint, RoundTripIsBitExact) {
  Rng rng(5);
  const auto f = random_flow(3, 5, rng);
  std::stringstream buf;
  write_flow_checkpoint(buf, f);
  EXPECT_EQ(buf.str().size(), 16u + 8u * 5u * 7u);
  const auto g = read_flow_checkpoint(buf);
  EXPECT_EQ(g.dim(), 3);
  EXPECT_EQ(g.n_layers(), 5u);
  EXPECT_EQ(g.params(), f.params());
  // header is little-endian D then K
  EXPECT_EQ(static_cast<unsigned char>(buf.str()[0]), 3);
  EXPECT_EQ(static_cast<unsigned char>(buf.str()[8]), 5);
}

TEST(FlowCheckpoint, TruncatedFileIsInputError) {
  std::stringstream buf;
  write_flow_checkpoint(buf, ComposedFlow::identity(2, 2));
  std::stringstream cut(buf.str().substr(0, 30));
  EXPECT_THROW(read_flow_checkpoint(cut), InputError);
}
