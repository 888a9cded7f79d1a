#ifndef SBAYES_CORESET_HPP
#define SBAYES_CORESET_HPP

// Bayesian coresets: sparse nonnegative reweightings w of the data potentials,
// pi_w(theta) ∝ pi0(theta) exp(sum_n w_n f_n(theta)).

#include "sbayes/mcmc.hpp"
#include "sbayes/model.hpp"

#include <algorithm>
#include <numeric>

namespace sbayes {

struct CoresetWeights {
  Vector w;

  std::vector<Eigen::Index> support() const {
    std::vector<Eigen::Index> s;
    for (Eigen::Index n = 0; n < w.size(); ++n)
      if (w[n] != 0.0) s.push_back(n);
    return s;
  }
  std::size_t size() const { return support().size(); }
};

/// M distinct indices drawn uniformly, each weighted N/M.
inline CoresetWeights uniform_coreset(const BayesModel& m, Eigen::Index budget, std::uint64_t seed) {
  const Eigen::Index n = m.n_obs();
  if (budget < 1 || budget > n) throw InputError("coreset budget must satisfy 1 <= M <= N");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  CoresetWeights c{Vector::Zero(n)};
  const double weight = static_cast<double>(n) / static_cast<double>(budget);
  for (Eigen::Index i = 0; i < budget; ++i) c.w[idx[static_cast<std::size_t>(i)]] = weight;
  return c;
}

/// S x N matrix of f_n(theta_s).
inline Matrix potential_matrix(const BayesModel& m, const Matrix& draws) {
  require(draws.cols() == m.dim(), "draws have the wrong dimension");
  Matrix f(draws.rows(), m.n_obs());
  for (Eigen::Index s = 0; s < draws.rows(); ++s) {
    const Vector t = draws.row(s).transpose();
    for (Eigen::Index n = 0; n < m.n_obs(); ++n) f(s, n) = m.datum_loglik(t, n);
  }
  return f;
}

/// Lawson-Hanson nonnegative least squares: argmin ||A x - b|| subject to x >= 0.
inline Vector nnls(const Matrix& a, const Vector& b, int max_iter = 0) {
  const Eigen::Index n = a.cols();
  if (max_iter <= 0) max_iter = static_cast<int>(3 * n + 10);
  Vector x = Vector::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double tol = 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()) * std::max(1.0, b.cwiseAbs().maxCoeff());

  auto solve_passive = [&]() {
    std::vector<Eigen::Index> p;
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[static_cast<std::size_t>(j)]) p.push_back(j);
    Matrix ap(a.rows(), static_cast<Eigen::Index>(p.size()));
    for (std::size_t k = 0; k < p.size(); ++k) ap.col(static_cast<Eigen::Index>(k)) = a.col(p[k]);
    const Vector zp = ap.colPivHouseholderQr().solve(b);
    Vector z = Vector::Zero(n);
    for (std::size_t k = 0; k < p.size(); ++k) z[p[k]] = zp[static_cast<Eigen::Index>(k)];
    return z;
  };

  for (int outer = 0; outer < max_iter; ++outer) {
    const Vector grad = a.transpose() * (b - a * x);
    Eigen::Index best = -1;
    double gmax = tol;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[static_cast<std::size_t>(j)] && grad[j] > gmax) {
        gmax = grad[j];
        best = j;
      }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;
    for (int inner = 0; inner < max_iter; ++inner) {
      const Vector z = solve_passive();
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z[j] <= 0) feasible = false;
      if (feasible) {
        x = z;
        break;
      }
      double alpha = 1.0;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z[j] <= 0) alpha = std::min(alpha, x[j] / (x[j] - z[j]));
      x += alpha * (z - x);
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && x[j] <= 1e-15) {
          passive[static_cast<std::size_t>(j)] = false;
          x[j] = 0.0;
        }
    }
  }
  return x;
}

struct SparseRegressionResult {
  CoresetWeights weights;
  double residual = 0.0;               ///< ||g - Phi w||
  std::vector<double> residual_trace;  ///< after each greedy selection
};

/// Greedy sparse regression: column n of Phi is the centered vector (f_n(theta_s))_s and
/// g = Phi 1. Each round adds the column best aligned with the residual, then refits the
/// active set by nonnegative least squares.
inline SparseRegressionResult sparse_regression_coreset(const BayesModel& m, Eigen::Index budget,
                                                        const Matrix& ref_draws) {
  if (ref_draws.rows() < 2) throw InputError("sparse regression coreset needs at least two reference draws");
  const Eigen::Index n = m.n_obs();
  if (budget < 1 || budget > n) throw InputError("coreset budget must satisfy 1 <= M <= N");
  Matrix phi = potential_matrix(m, ref_draws);
  phi.rowwise() -= phi.colwise().mean();
  const Vector g = phi.rowwise().sum();
  const Vector norms = phi.colwise().norm();
  const double gnorm = g.norm();

  SparseRegressionResult out{{Vector::Zero(n)}, gnorm, {}};
  std::vector<Eigen::Index> active;
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  Vector r = g;
  while (static_cast<Eigen::Index>(active.size()) < budget && r.norm() > 1e-12 * std::max(1.0, gnorm)) {
    Eigen::Index best = -1;
    double score = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)] || norms[j] == 0.0) continue;
      const double c = phi.col(j).dot(r) / norms[j];
      if (c > score) {
        score = c;
        best = j;
      }
    }
    if (best < 0) break;
    used[static_cast<std::size_t>(best)] = true;
    active.push_back(best);
    Matrix a(phi.rows(), static_cast<Eigen::Index>(active.size()));
    for (std::size_t k = 0; k < active.size(); ++k) a.col(static_cast<Eigen::Index>(k)) = phi.col(active[k]);
    const Vector wa = nnls(a, g);
    out.weights.w.setZero();
    for (std::size_t k = 0; k < active.size(); ++k) out.weights.w[active[k]] = wa[static_cast<Eigen::Index>(k)];
    r = g - a * wa;
    out.residual_trace.push_back(r.norm());
  }
  out.residual = r.norm();
  return out;
}

/// d KL(pi_w || pi) / d w_n = -Cov_w[f_n, sum_i (1 - w_i) f_i], estimated from draws of pi_w.
inline Vector kl_weight_grad(const BayesModel& m, const Vector& w, const Matrix& draws) {
  if (draws.rows() < 2) throw InputError("weight gradient needs at least two draws");
  require(w.size() == m.n_obs(), "weight vector length must equal N");
  Matrix f = potential_matrix(m, draws);
  Vector resid = f * (Vector::Ones(w.size()) - w);
  resid.array() -= resid.mean();
  f.rowwise() -= f.colwise().mean();
  return -(f.transpose() * resid) / static_cast<double>(draws.rows() - 1);
}

/// KL(pi_w || pi) between the exact Gaussian posteriors of a conjugate model.
inline double exact_gaussian_coreset_kl(const BayesModel& m, const Vector& w) {
  if (!m.is_conjugate()) throw UnsupportedModelError("exact coreset KL needs a conjugate model");
  return gaussian_kl(conjugate_posterior(m, w), conjugate_posterior(m));
}

struct CoresetBuildConfig {
  enum class Optimizer { kFirstOrder, kQuasiNewton };
  Eigen::Index budget = 10;  ///< M
  int n_draws = 500;         ///< S draws per gradient
  int n_opt_steps = 30;
  double step_size = 1.0;
  Optimizer optimizer = Optimizer::kQuasiNewton;
  TunedHmcConfig hmc{0.1, 10, 200, 500, 0.6, 0.8};
  std::uint64_t seed = 0;
};

struct CoresetOptimizeResult {
  CoresetWeights weights;
  std::vector<double> grad_norm_trace;  ///< ||grad on support|| per iteration
  std::vector<double> exact_kl_trace;   ///< closed-form KL after each iteration (conjugate models only)
  std::size_t hmc_divergences = 0;
};

/// Subsample-then-optimize: weights on a fixed support, updated from fresh HMC draws of pi_w
/// each iteration and projected back onto w >= 0. The quasi-Newton step preconditions with the
/// sample covariance of the support potentials (the Hessian of the KL at the optimum).
inline CoresetOptimizeResult optimize_weights(const BayesModel& m, const std::vector<Eigen::Index>& support,
                                              const CoresetBuildConfig& cfg, const Vector& init = {}) {
  const Eigen::Index n = m.n_obs();
  const auto k = static_cast<Eigen::Index>(support.size());
  if (k < 1 || k > cfg.budget) throw InputError("support size must be between 1 and the budget M");
  if (cfg.n_draws < 2 || cfg.n_opt_steps < 0 || !(cfg.step_size > 0)) throw ConfigError("invalid coreset optimizer configuration");
  for (Eigen::Index s : support) require(s >= 0 && s < n, "support index out of range");

  CoresetOptimizeResult out;
  out.weights.w = Vector::Zero(n);
  if (init.size() == n) {
    for (Eigen::Index s : support) out.weights.w[s] = init[s];
  } else {
    for (Eigen::Index s : support) out.weights.w[s] = static_cast<double>(n) / static_cast<double>(k);
  }
  Vector& w = out.weights.w;
  Vector x = Vector::Zero(m.dim());
  TunedHmcConfig hc = cfg.hmc;
  hc.n_samples = cfg.n_draws;

  for (int it = 0; it < cfg.n_opt_steps; ++it) {
    const TunedHmcRun run = run_tuned_hmc(weighted_target(m, w), x, hc, derive_seed(cfg.seed, static_cast<std::uint64_t>(it)));
    out.hmc_divergences += run.divergences;
    if (run.divergence_rate() > 0.5)
      throw NumericError("coreset HMC divergence rate above 50% at iteration " + std::to_string(it));
    hc.initial_eps = run.eps;
    x = run.last;

    const Vector g = kl_weight_grad(m, w, run.draws);
    Vector gs(k);
    for (Eigen::Index i = 0; i < k; ++i) gs[i] = g[support[static_cast<std::size_t>(i)]];
    out.grad_norm_trace.push_back(gs.norm());

    Vector dir = gs;
    if (cfg.optimizer == CoresetBuildConfig::Optimizer::kQuasiNewton) {
      Matrix fs(run.draws.rows(), k);
      for (Eigen::Index s = 0; s < run.draws.rows(); ++s) {
        const Vector t = run.draws.row(s).transpose();
        for (Eigen::Index i = 0; i < k; ++i) fs(s, i) = m.datum_loglik(t, support[static_cast<std::size_t>(i)]);
      }
      fs.rowwise() -= fs.colwise().mean();
      Matrix h = fs.transpose() * fs / static_cast<double>(fs.rows() - 1);
      const double ridge = 1e-6 * std::max(h.trace() / static_cast<double>(k), 1e-300);
      h.diagonal().array() += ridge;
      dir = h.ldlt().solve(gs);
    }
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index s = support[static_cast<std::size_t>(i)];
      w[s] = std::max(0.0, w[s] - cfg.step_size * dir[i]);
    }
    if (m.is_conjugate()) out.exact_kl_trace.push_back(exact_gaussian_coreset_kl(m, w));
  }
  return out;
}

}  // namespace sbayes

#endif  // SBAYES_CORESET_HPP
