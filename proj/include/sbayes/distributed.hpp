#ifndef SBAYES_DISTRIBUTED_HPP
#define SBAYES_DISTRIBUTED_HPP

// Divide-and-conquer posterior inference with simulated in-process workers:
// one-shot subset chains and combiners, distributed SGLD, and AXDA Gibbs.

#include "sbayes/dataset.hpp"
#include "sbayes/mcmc.hpp"
#include "sbayes/model.hpp"

#include <algorithm>
#include <numeric>

namespace sbayes {

enum class SubsetMode { kTemperedPrior, kPoweredLikelihood };

/// Subset posterior: prior^(1/K) x subset likelihood, or prior x subset likelihood^K.
inline TargetModel subset_target(const BayesModel& m, const Dataset& subset, SubsetMode mode, int k) {
  require(k >= 1, "subset count must be positive");
  const BayesModel sm = m.with_data(subset);
  if (mode == SubsetMode::kTemperedPrior) return weighted_target(sm, Vector::Ones(sm.n_obs()), 1.0 / k);
  return weighted_target(sm, Vector::Constant(sm.n_obs(), static_cast<double>(k)), 1.0);
}

inline GaussianFactor subset_posterior_factor(const BayesModel& m, const Dataset& subset, SubsetMode mode, int k) {
  const BayesModel sm = m.with_data(subset);
  if (mode == SubsetMode::kTemperedPrior) return posterior_factor(sm, {}, 1.0 / k);
  return posterior_factor(sm, Vector::Constant(sm.n_obs(), static_cast<double>(k)), 1.0);
}

struct WorkerDraws {
  std::vector<Matrix> draws;  ///< T x p per subset
  std::vector<std::uint64_t> seeds;
  SubsetMode mode = SubsetMode::kTemperedPrior;

  int k() const { return static_cast<int>(draws.size()); }
  Eigen::Index t() const { return draws.empty() ? 0 : draws.front().rows(); }
  Eigen::Index dim() const { return draws.empty() ? 0 : draws.front().cols(); }

  void validate() const {
    require(!draws.empty(), "no worker draws");
    for (const auto& d : draws) {
      require(d.rows() == t() && d.cols() == dim(), "worker draw matrices must share T and p");
      require(d.allFinite(), "worker draws must be finite");
    }
  }
};

/// Each worker runs tuned HMC on its own subset posterior from its own seed; workers never
/// see each other's data.
inline WorkerDraws run_subset_chains(const BayesModel& m, const std::vector<Dataset>& shards, SubsetMode mode,
                                     const TunedHmcConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                     int threads = 1) {
  const int k = static_cast<int>(shards.size());
  require(k >= 1, "need at least one subset");
  require(static_cast<int>(seeds.size()) == k, "need one seed per subset");
  WorkerDraws out{std::vector<Matrix>(static_cast<std::size_t>(k)), seeds, mode};
  std::vector<double> div_rate(static_cast<std::size_t>(k), 0.0);
  parallel_for(static_cast<std::size_t>(k), threads, [&](std::size_t j) {
    const TargetModel t = subset_target(m, shards[j], mode, k);
    const TunedHmcRun run = run_tuned_hmc(t, Vector::Zero(m.dim()), cfg, seeds[j]);
    out.draws[j] = run.draws;
    div_rate[j] = run.divergence_rate();
  });
  for (int j = 0; j < k; ++j)
    if (div_rate[static_cast<std::size_t>(j)] > 0.5)
      throw NumericError("worker for subset " + std::to_string(j) + " diverged on more than half of its steps");
  return out;
}

// ---------------------------------------------------------------- combiners

inline Matrix sample_covariance(const Matrix& x) {
  const Matrix c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

/// Inverse sample covariance of each subset's draws.
inline std::vector<Matrix> consensus_weights(const WorkerDraws& wd) {
  wd.validate();
  require(wd.t() >= 2, "consensus weights need at least two draws per subset");
  std::vector<Matrix> w;
  for (int j = 0; j < wd.k(); ++j) {
    const Eigen::LDLT<Matrix> ldlt(sample_covariance(wd.draws[static_cast<std::size_t>(j)]));
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 1e-14 * std::max(1.0, ldlt.vectorD().cwiseAbs().maxCoeff())).all())
      throw NumericError("sample covariance of subset " + std::to_string(j) + " is singular; increase T");
    w.push_back(ldlt.solve(Matrix::Identity(wd.dim(), wd.dim())));
  }
  return w;
}

/// combined_t = (sum_j W_j)^-1 sum_j W_j theta_(j)t
inline Matrix consensus_gaussian(const WorkerDraws& wd) {
  if (wd.k() == 1) {
    wd.validate();
    return wd.draws.front();
  }
  const std::vector<Matrix> w = consensus_weights(wd);
  Matrix total = Matrix::Zero(wd.dim(), wd.dim());
  for (const auto& wj : w) total += wj;
  const Eigen::LDLT<Matrix> solver(total);
  Matrix acc = Matrix::Zero(wd.t(), wd.dim());
  for (int j = 0; j < wd.k(); ++j) acc += wd.draws[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(j)];
  return solver.solve(acc.transpose()).transpose();
}

/// Linear-interpolation empirical quantile of sorted values.
inline double sorted_quantile(const std::vector<double>& s, double alpha) {
  const double pos = alpha * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

inline std::vector<std::vector<double>> sorted_subsets(const WorkerDraws& wd) {
  wd.validate();
  if (wd.dim() != 1) throw UnsupportedModelError("quantile combiners are one-dimensional");
  std::vector<std::vector<double>> s;
  for (const auto& d : wd.draws) {
    std::vector<double> v(d.data(), d.data() + d.rows());
    std::sort(v.begin(), v.end());
    s.push_back(std::move(v));
  }
  return s;
}

inline void check_alpha_grid(const Vector& alpha) {
  require(alpha.size() >= 1, "alpha grid is empty");
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    require(alpha[i] > 0 && alpha[i] < 1, "alpha grid must lie in (0, 1)");
    if (i) require(alpha[i] > alpha[i - 1], "alpha grid must be increasing");
  }
}

/// Mean over subsets of the empirical alpha-quantiles (1-D).
inline Vector quantile_average(const WorkerDraws& wd, const Vector& alpha) {
  check_alpha_grid(alpha);
  const auto s = sorted_subsets(wd);
  Vector q = Vector::Zero(alpha.size());
  for (const auto& v : s)
    for (Eigen::Index i = 0; i < alpha.size(); ++i) q[i] += sorted_quantile(v, alpha[i]);
  return q / static_cast<double>(s.size());
}

inline Vector uniform_alpha_grid(int n) {
  Vector a(n);
  for (int i = 0; i < n; ++i) a[i] = (i + 0.5) / n;
  return a;
}

struct WassersteinMedian {
  Vector alpha;
  Vector quantiles;        ///< median quantile function on the grid
  Vector subset_weights;   ///< final Weiszfeld weights, summing to one
  int iterations = 0;
};

/// Geometric median of the subset measures in W2 (1-D): Weiszfeld iterations on quantile
/// functions sampled on the grid, stopping at relative change <= tol.
inline WassersteinMedian wasserstein_median(const WorkerDraws& wd, const Vector& alpha = uniform_alpha_grid(1000),
                                            double tol = 1e-8, int max_iter = 10000) {
  check_alpha_grid(alpha);
  const auto s = sorted_subsets(wd);
  const auto k = static_cast<Eigen::Index>(s.size());
  Matrix q(alpha.size(), k);
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < alpha.size(); ++i) q(i, j) = sorted_quantile(s[static_cast<std::size_t>(j)], alpha[i]);
  const double h = 1.0 / static_cast<double>(alpha.size());
  WassersteinMedian out{alpha, q.rowwise().mean(), Vector::Constant(k, 1.0 / k), 0};
  if (k == 1) return out;
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    Vector inv(k);
    for (Eigen::Index j = 0; j < k; ++j) {
      const double d = std::sqrt(h * (out.quantiles - q.col(j)).squaredNorm());
      if (d < 1e-12) {  // iterate sits on a subset: it is the median candidate
        out.quantiles = q.col(j);
        out.subset_weights = Vector::Unit(k, j);
        return out;
      }
      inv[j] = 1.0 / d;
    }
    out.subset_weights = inv / inv.sum();
    const Vector next = q * out.subset_weights;
    const double change = (next - out.quantiles).norm() / std::max(1e-300, out.quantiles.norm());
    out.quantiles = next;
    if (change <= tol) break;
  }
  return out;
}

/// Atoms theta_hat + theta_(j)l - theta_hat_j with weight 1/(KT) each.
inline Matrix recentered_mixture(const WorkerDraws& wd) {
  wd.validate();
  std::vector<Vector> means;
  Vector grand = Vector::Zero(wd.dim());
  for (const auto& d : wd.draws) {
    means.push_back(d.colwise().mean().transpose());
    grand += means.back();
  }
  grand /= static_cast<double>(wd.k());
  Matrix atoms(wd.k() * wd.t(), wd.dim());
  for (int j = 0; j < wd.k(); ++j) {
    const Vector shift = grand - means[static_cast<std::size_t>(j)];
    atoms.middleRows(j * wd.t(), wd.t()) = wd.draws[static_cast<std::size_t>(j)].rowwise() + shift.transpose();
  }
  return atoms;
}

// ---------------------------------------------------------------- SGLD / DSGLD

inline void check_sgld_schedule(const StepSchedule& s) {
  if (!(s.a > 0 && s.b > 0) || !(s.gamma == 0.0 || s.robbins_monro()))
    throw ConfigError("step schedule needs a, b > 0 and gamma = 0 (constant) or gamma in (0.5, 1]");
}

/// grad log pi0(theta) + scale * sum_{i in batch} grad f_i(theta)
inline Vector stochastic_gradient(const BayesModel& m, const Vector& theta, const std::vector<Eigen::Index>& batch,
                                  double scale) {
  Vector g = m.grad_log_prior(theta);
  for (Eigen::Index i : batch) m.add_datum_grad(theta, i, scale, g);
  return g;
}

/// Minibatch estimate of the full log-posterior gradient with the N/n inflation.
inline Vector sgld_gradient(const BayesModel& m, const Vector& theta, Eigen::Index batch_size, Rng& rng) {
  const auto batch = draw_minibatch(m.n_obs(), batch_size, rng);
  return stochastic_gradient(m, theta, batch, static_cast<double>(m.n_obs()) / static_cast<double>(batch_size));
}

struct SgldConfig {
  Eigen::Index batch_size = 10;
  StepSchedule schedule;
  std::int64_t n_steps = 1000;
  Vector init;  ///< empty means the origin
};

struct SgldChain {
  Matrix draws;  ///< row 0 is the initial point, row t the state after t steps
};

namespace detail {
inline Vector langevin_update(const Vector& theta, const Vector& g, double h, Rng& noise) {
  return theta + (0.5 * h) * g + std::sqrt(h) * standard_normal_vector(theta.size(), noise);
}
}  // namespace detail

/// theta <- theta + (h_t / 2) g_hat + N(0, h_t I), no MH correction.
inline SgldChain sgld_run(const BayesModel& m, const SgldConfig& cfg, std::uint64_t seed) {
  check_sgld_schedule(cfg.schedule);
  if (cfg.batch_size < 1 || cfg.batch_size > m.n_obs()) throw ConfigError("minibatch size must be in [1, N]");
  if (cfg.n_steps < 0) throw ConfigError("step count must be nonnegative");
  Rng batch_rng(derive_seed(seed, 1)), noise_rng(derive_seed(seed, 2));
  Vector theta = cfg.init.size() ? cfg.init : Vector::Zero(m.dim());
  require(theta.size() == m.dim(), "initial point has the wrong dimension");
  SgldChain out{Matrix(cfg.n_steps + 1, m.dim())};
  out.draws.row(0) = theta.transpose();
  for (std::int64_t t = 0; t < cfg.n_steps; ++t) {
    const Vector g = sgld_gradient(m, theta, cfg.batch_size, batch_rng);
    theta = detail::langevin_update(theta, g, cfg.schedule(t), noise_rng);
    if (!theta.allFinite()) throw NumericError("SGLD iterate became non-finite at step " + std::to_string(t));
    out.draws.row(t + 1) = theta.transpose();
  }
  return out;
}

struct DsgldConfig {
  Vector p;                  ///< subset visit probabilities
  Eigen::Index batch_size = 10;
  int block_len = 10;
  StepSchedule schedule;
  std::int64_t n_steps = 1000;
  Vector init;
};

struct DsgldRun {
  Matrix draws;                 ///< as SgldChain
  std::vector<int> visits;      ///< subset chosen for each block
  std::size_t communication_events = 0;  ///< completed hand-offs between workers
};

inline void check_dsgld(const DsgldConfig& cfg, const std::vector<Dataset>& shards) {
  check_sgld_schedule(cfg.schedule);
  require(!shards.empty(), "need at least one subset");
  if (cfg.p.size() != static_cast<Eigen::Index>(shards.size())) throw ConfigError("need one probability per subset");
  if (!(cfg.p.array() > 0).all() || std::abs(cfg.p.sum() - 1.0) > 1e-12)
    throw ConfigError("subset probabilities must be positive and sum to 1");
  for (const auto& s : shards)
    if (cfg.batch_size < 1 || cfg.batch_size > s.n_obs()) throw ConfigError("minibatch size must be in [1, M]");
  if (cfg.block_len < 1 || cfg.n_steps < 0) throw ConfigError("invalid DSGLD block length or step count");
}

/// Shard-and-minibatch gradient: grad log pi0 + M / (p_j m) sum_{i in batch of shard j} grad f_i.
inline Vector dsgld_gradient(const BayesModel& shard_model, const Vector& theta, double p_j, Eigen::Index batch_size,
                             Rng& rng) {
  const auto batch = draw_minibatch(shard_model.n_obs(), batch_size, rng);
  const double scale = static_cast<double>(shard_model.n_obs()) / (p_j * static_cast<double>(batch_size));
  return stochastic_gradient(shard_model, theta, batch, scale);
}

inline DsgldRun dsgld_run(const BayesModel& m, const std::vector<Dataset>& shards, const DsgldConfig& cfg,
                          std::uint64_t seed) {
  check_dsgld(cfg, shards);
  std::vector<BayesModel> models;
  for (const auto& s : shards) models.push_back(m.with_data(s));
  Rng batch_rng(derive_seed(seed, 1)), noise_rng(derive_seed(seed, 2)), visit_rng(derive_seed(seed, 3));
  std::discrete_distribution<int> pick(cfg.p.data(), cfg.p.data() + cfg.p.size());
  Vector theta = cfg.init.size() ? cfg.init : Vector::Zero(m.dim());
  require(theta.size() == m.dim(), "initial point has the wrong dimension");
  DsgldRun out{Matrix(cfg.n_steps + 1, m.dim()), {}, 0};
  out.draws.row(0) = theta.transpose();
  int j = 0;
  for (std::int64_t t = 0; t < cfg.n_steps; ++t) {
    if (t % cfg.block_len == 0) {
      j = pick(visit_rng);
      out.visits.push_back(j);
    }
    const auto ju = static_cast<std::size_t>(j);
    const Vector g = dsgld_gradient(models[ju], theta, cfg.p[j], cfg.batch_size, batch_rng);
    theta = detail::langevin_update(theta, g, cfg.schedule(t), noise_rng);
    if (!theta.allFinite()) throw NumericError("DSGLD iterate became non-finite at step " + std::to_string(t));
    out.draws.row(t + 1) = theta.transpose();
    if ((t + 1) % cfg.block_len == 0) ++out.communication_events;
  }
  return out;
}

// ---------------------------------------------------------------- AXDA

namespace detail {
inline void require_gaussian_location(const BayesModel& m) {
  if (!std::holds_alternative<GaussianLocationLik>(m.likelihood()) || m.prior_scale() != 1.0)
    throw UnsupportedModelError("AXDA is implemented for the conjugate Gaussian location model only");
}
}  // namespace detail

/// theta-marginal of the rho-augmented model: N(0, I) prior times prod_k N(ybar_k; theta, (1/M_k + rho^2) I).
inline GaussianPosterior axda_theta_marginal(const BayesModel& m, const std::vector<Dataset>& shards, double rho) {
  detail::require_gaussian_location(m);
  require(rho > 0, "rho must be positive");
  double prec = 1.0;
  Vector shift = Vector::Zero(m.dim());
  for (const auto& s : shards) {
    const double v = 1.0 / static_cast<double>(s.n_obs()) + rho * rho;
    prec += 1.0 / v;
    shift += s.rows().colwise().mean().transpose() / v;
  }
  return GaussianPosterior(shift / prec, Matrix::Identity(m.dim(), m.dim()) / prec);
}

struct AxdaRun {
  Matrix theta;               ///< iters x p
  std::vector<Vector> z_last;  ///< final auxiliary blocks
};

/// Alternates z_k | theta, Y_k (independent across k, each from its own stream) and theta | z.
/// `order` permutes the z-update order; with per-subset streams the chain does not depend on it.
inline AxdaRun axda_gibbs(const BayesModel& m, const std::vector<Dataset>& shards, double rho, std::int64_t iters,
                          std::uint64_t seed, const std::vector<int>& order = {}, const Vector& init = {}) {
  detail::require_gaussian_location(m);
  require(rho > 0, "rho must be positive");
  require(iters >= 0, "iteration count must be nonnegative");
  const auto k = static_cast<int>(shards.size());
  require(k >= 1, "need at least one subset");
  std::vector<int> ord = order;
  if (ord.empty()) {
    ord.resize(static_cast<std::size_t>(k));
    std::iota(ord.begin(), ord.end(), 0);
  }
  require(static_cast<int>(ord.size()) == k, "update order must list every subset");
  const Eigen::Index d = m.dim();
  const double r2inv = 1.0 / (rho * rho);
  std::vector<Vector> sums;
  std::vector<double> zprec;
  for (const auto& s : shards) {
    sums.push_back(s.rows().colwise().sum().transpose());
    zprec.push_back(static_cast<double>(s.n_obs()) + r2inv);
  }
  std::vector<Rng> zrng;
  for (int j = 0; j < k; ++j) zrng.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(j) + 1));
  Rng trng(derive_seed(seed, 0));
  // one distribution per stream: normal_distribution caches half of each generated pair
  std::vector<std::normal_distribution<double>> znd(static_cast<std::size_t>(k));
  std::normal_distribution<double> tnd;
  const double tprec = 1.0 + k * r2inv;
  const double tsd = 1.0 / std::sqrt(tprec);

  Vector theta = init.size() ? init : Vector::Zero(d);
  require(theta.size() == d, "initial point has the wrong dimension");
  std::vector<Vector> z(static_cast<std::size_t>(k), Vector::Zero(d));
  AxdaRun out{Matrix(iters, d), {}};
  for (std::int64_t it = 0; it < iters; ++it) {
    for (int j : ord) {
      const auto ju = static_cast<std::size_t>(j);
      const double sd = 1.0 / std::sqrt(zprec[ju]);
      for (Eigen::Index c = 0; c < d; ++c)
        z[ju][c] = (sums[ju][c] + theta[c] * r2inv) / zprec[ju] + sd * znd[ju](zrng[ju]);
    }
    for (Eigen::Index c = 0; c < d; ++c) {
      double s = 0;
      for (int j = 0; j < k; ++j) s += z[static_cast<std::size_t>(j)][c];
      theta[c] = s * r2inv / tprec + tsd * tnd(trng);
    }
    out.theta.row(it) = theta.transpose();
  }
  out.z_last = z;
  return out;
}

// ---------------------------------------------------------------- TV diagnostic

/// Total variation between two 1-D Gaussians by Simpson quadrature over a covering interval.
inline double gaussian_tv_1d(double m1, double v1, double m2, double v2, int n = 20000) {
  const double s1 = std::sqrt(v1), s2 = std::sqrt(v2);
  const double lo = std::min(m1 - 12 * s1, m2 - 12 * s2), hi = std::max(m1 + 12 * s1, m2 + 12 * s2);
  auto pdf = [](double x, double m, double s) { return std::exp(-0.5 * std::pow((x - m) / s, 2)) / (s * std::sqrt(2 * std::numbers::pi)); };
  const double h = (hi - lo) / n;
  double acc = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + i * h;
    const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
    acc += w * std::abs(pdf(x, m1, s1) - pdf(x, m2, s2));
  }
  return 0.5 * acc * h / 3;
}

/// Maximum-likelihood estimate of a conjugate model (likelihood factor only).
inline Vector conjugate_mle(const BayesModel& m) {
  const GaussianFactor f = posterior_factor(m, {}, 0.0);
  const Eigen::LDLT<Matrix> ldlt(f.precision);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0).all())
    throw NumericError("likelihood is not identifiable; MLE undefined");
  return ldlt.solve(f.shift);
}

struct TvBoundReport {
  double tv_estimate = 0.0;  ///< TV(Gaussian fit of combined draws, exact posterior)
  double mle_gap = 0.0;      ///< |mean of subset MLEs - full MLE|
};

inline TvBoundReport tv_bound_check(const Matrix& combined, const BayesModel& m, const std::vector<Dataset>& shards) {
  if (combined.cols() != 1 || m.dim() != 1) throw UnsupportedModelError("TV bound check is one-dimensional");
  require(combined.rows() >= 2, "need at least two combined draws");
  const GaussianPosterior exact = conjugate_posterior(m);
  const double mean = combined.col(0).mean();
  const double var = (combined.col(0).array() - mean).square().sum() / static_cast<double>(combined.rows() - 1);
  TvBoundReport r;
  r.tv_estimate = gaussian_tv_1d(mean, var, exact.mean()[0], exact.covariance()(0, 0));
  double avg = 0;
  for (const auto& s : shards) avg += conjugate_mle(m.with_data(s))[0];
  avg /= static_cast<double>(shards.size());
  r.mle_gap = std::abs(avg - conjugate_mle(m)[0]);
  return r;
}

}  // namespace sbayes

#endif  // SBAYES_DISTRIBUTED_HPP
