#ifndef SBAYES_VARINF_HPP
#define SBAYES_VARINF_HPP

#include "sbayes/common.hpp"
#include "sbayes/dataset.hpp"
#include "sbayes/gaussian.hpp"
#include "sbayes/model.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace sbayes {

/// y_n ~ N(mu, 1/tau), mu | tau ~ N(mu0, 1/(lambda0 tau)), tau ~ Gamma(a0, b0) (rate form).
/// Mean-field factors are q(mu) then q(tau).
class NormalGammaModel {
 public:
  NormalGammaModel(const Dataset& data, double mu0 = 0.0, double lambda0 = 1.0, double a0 = 1.0, double b0 = 1.0)
      : mu0_(mu0), lambda0_(lambda0), a0_(a0), b0_(b0) {
    require(data.obs_dim() == 1, "normal-gamma model needs scalar observations");
    require(lambda0 > 0 && a0 > 0 && b0 > 0, "normal-gamma hyperparameters must be positive");
    const Matrix& y = data.rows();
    n_ = static_cast<double>(y.rows());
    s1_ = y.sum();
    s2_ = y.squaredNorm();
    data_ = data;
  }

  double mu0() const { return mu0_; }
  double lambda0() const { return lambda0_; }
  double a0() const { return a0_; }
  double b0() const { return b0_; }
  double n() const { return n_; }
  double sum() const { return s1_; }
  double sum_sq() const { return s2_; }
  const Dataset& data() const { return data_; }

 private:
  double mu0_, lambda0_, a0_, b0_;
  double n_ = 0, s1_ = 0, s2_ = 0;
  Dataset data_;
};

/// Conjugate BayesModel (Gaussian location, linear regression) or Normal-Gamma.
using VbModel = std::variant<BayesModel, NormalGammaModel>;

struct NormalFactor {
  double mean = 0.0;
  double var = 1.0;
};
struct GammaFactor {
  double shape = 1.0;
  double rate = 1.0;
};
using VbFactor = std::variant<NormalFactor, GammaFactor>;

struct MeanFieldState {
  std::vector<VbFactor> factors;
  std::vector<double> elbo_trace;
  std::size_t projections = 0;  ///< SVI domain projections

  const NormalFactor& normal(std::size_t j) const { return std::get<NormalFactor>(factors.at(j)); }
  const GammaFactor& gamma(std::size_t j) const { return std::get<GammaFactor>(factors.at(j)); }
};

/// Product of the normal factors as one diagonal Gaussian.
inline GaussianPosterior mean_field_gaussian(const MeanFieldState& q) {
  Vector m(static_cast<Eigen::Index>(q.factors.size())), v(m.size());
  for (std::size_t j = 0; j < q.factors.size(); ++j) {
    m[static_cast<Eigen::Index>(j)] = q.normal(j).mean;
    v[static_cast<Eigen::Index>(j)] = q.normal(j).var;
  }
  return {m, v.asDiagonal()};
}

namespace detail {

inline const BayesModel& conjugate_or_throw(const BayesModel& m) {
  if (!m.is_conjugate()) throw UnsupportedModelError("no closed-form ELBO for this model; use mc_elbo");
  return m;
}

inline void check_domain(const MeanFieldState& q, std::size_t expected) {
  require(q.factors.size() == expected,
          "variational state has " + std::to_string(q.factors.size()) + " factors, expected " + std::to_string(expected));
  for (std::size_t j = 0; j < q.factors.size(); ++j) {
    std::visit(
        [&](const auto& f) {
          using F = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<F, NormalFactor>)
            require(std::isfinite(f.mean) && f.var > 0 && std::isfinite(f.var),
                    "factor " + std::to_string(j) + ": normal variance must be positive and finite");
          else
            require(f.shape > 0 && f.rate > 0 && std::isfinite(f.shape) && std::isfinite(f.rate),
                    "factor " + std::to_string(j) + ": gamma shape and rate must be positive");
        },
        q.factors[j]);
  }
}

inline void ensure_updated(bool ok, std::size_t j) {
  if (!ok) throw NumericError("CAVI update left the domain at factor " + std::to_string(j));
}

// Gaussian models: log p(theta, X) = -1/2 theta'P theta + h'theta + c.
inline double gaussian_elbo(const GaussianFactor& joint, const MeanFieldState& q) {
  const auto d = joint.precision.rows();
  Vector m(d), v(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    m[j] = q.normal(static_cast<std::size_t>(j)).mean;
    v[j] = q.normal(static_cast<std::size_t>(j)).var;
  }
  const double quad = m.dot(joint.precision * m) + joint.precision.diagonal().dot(v);
  const double entropy = 0.5 * (static_cast<double>(d) * (kLog2Pi + 1.0) + v.array().log().sum());
  return -0.5 * quad + joint.shift.dot(m) + joint.constant + entropy;
}

/// CAVI target for coordinate j as (precision, precision * mean).
inline std::pair<double, double> gaussian_target(const GaussianFactor& joint, const MeanFieldState& q, Eigen::Index j) {
  double r = joint.shift[j];
  for (Eigen::Index k = 0; k < joint.precision.rows(); ++k)
    if (k != j) r -= joint.precision(j, k) * q.normal(static_cast<std::size_t>(k)).mean;
  return {joint.precision(j, j), r};
}

struct NgStats {
  double n, s1, s2;
};

inline double ng_elbo(const NormalGammaModel& m, const NgStats& st, const NormalFactor& qm, const GammaFactor& qt) {
  using boost::math::digamma;
  const double e_tau = qt.shape / qt.rate;
  const double e_log_tau = digamma(qt.shape) - std::log(qt.rate);
  const double e_sq = st.s2 - 2 * qm.mean * st.s1 + st.n * (qm.mean * qm.mean + qm.var);
  const double loglik = 0.5 * st.n * (e_log_tau - kLog2Pi) - 0.5 * e_tau * e_sq;
  const double dmu = qm.mean - m.mu0();
  const double log_p_mu =
      0.5 * (std::log(m.lambda0()) + e_log_tau - kLog2Pi) - 0.5 * m.lambda0() * e_tau * (dmu * dmu + qm.var);
  const double log_p_tau =
      m.a0() * std::log(m.b0()) - std::lgamma(m.a0()) + (m.a0() - 1) * e_log_tau - m.b0() * e_tau;
  const double h_mu = 0.5 * (kLog2Pi + 1.0 + std::log(qm.var));
  const double h_tau = qt.shape - std::log(qt.rate) + std::lgamma(qt.shape) + (1 - qt.shape) * digamma(qt.shape);
  return loglik + log_p_mu + log_p_tau + h_mu + h_tau;
}

inline NormalFactor ng_mu_target(const NormalGammaModel& m, const NgStats& st, const GammaFactor& qt) {
  const double lam = m.lambda0() + st.n;
  return {(m.lambda0() * m.mu0() + st.s1) / lam, 1.0 / (lam * qt.shape / qt.rate)};
}

inline GammaFactor ng_tau_target(const NormalGammaModel& m, const NgStats& st, const NormalFactor& qm) {
  const double e_sq = st.s2 - 2 * qm.mean * st.s1 + st.n * (qm.mean * qm.mean + qm.var);
  const double dmu = qm.mean - m.mu0();
  return {m.a0() + 0.5 * (st.n + 1), m.b0() + 0.5 * (e_sq + m.lambda0() * (dmu * dmu + qm.var))};
}

inline NgStats ng_stats(const NormalGammaModel& m) { return {m.n(), m.sum(), m.sum_sq()}; }

}  // namespace detail

inline std::size_t factor_count(const VbModel& model) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>)
          return static_cast<std::size_t>(m.dim());
        else
          return 2;
      },
      model);
}

/// Factorized prior start: N(0, s^2) per coordinate, or q(mu) = N(mu0, b0/(a0 lambda0)), q(tau) = Gamma(a0, b0).
inline MeanFieldState prior_state(const VbModel& model) {
  MeanFieldState q;
  std::visit(
      [&](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>) {
          for (Eigen::Index j = 0; j < m.dim(); ++j) q.factors.emplace_back(NormalFactor{0.0, m.prior_scale() * m.prior_scale()});
        } else {
          q.factors.emplace_back(NormalFactor{m.mu0(), m.b0() / (m.a0() * m.lambda0())});
          q.factors.emplace_back(GammaFactor{m.a0(), m.b0()});
        }
      },
      model);
  return q;
}

/// Exact log marginal likelihood log p(X).
inline double log_evidence(const VbModel& model) {
  return std::visit(
      [](const auto& m) -> double {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>) {
          return log_evidence(m);
        } else {
          const double lam = m.lambda0() + m.n();
          const double a = m.a0() + 0.5 * m.n();
          const double shifted = m.sum() + m.lambda0() * m.mu0();
          const double b = m.b0() + 0.5 * (m.sum_sq() + m.lambda0() * m.mu0() * m.mu0() - shifted * shifted / lam);
          return std::lgamma(a) - std::lgamma(m.a0()) + m.a0() * std::log(m.b0()) - a * std::log(b) +
                 0.5 * std::log(m.lambda0() / lam) - 0.5 * m.n() * kLog2Pi;
        }
      },
      model);
}

/// Closed-form ELBO = E_Q[log p(theta, X)] + H[Q].
inline double elbo(const VbModel& model, const MeanFieldState& q) {
  detail::check_domain(q, factor_count(model));
  return std::visit(
      [&](const auto& m) -> double {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>)
          return detail::gaussian_elbo(posterior_factor(detail::conjugate_or_throw(m)), q);
        else
          return detail::ng_elbo(m, detail::ng_stats(m), q.normal(0), q.gamma(1));
      },
      model);
}

/// One coordinate-ascent pass; `order` defaults to ascending factor index.
inline MeanFieldState cavi_sweep(const VbModel& model, MeanFieldState q, std::span<const int> order = {}) {
  const std::size_t nf = factor_count(model);
  detail::check_domain(q, nf);
  std::vector<int> ord(order.begin(), order.end());
  if (ord.empty()) {
    ord.resize(nf);
    std::iota(ord.begin(), ord.end(), 0);
  }
  require(ord.size() == nf, "update order must list every factor");
  std::visit(
      [&](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>) {
          const GaussianFactor joint = posterior_factor(detail::conjugate_or_throw(m));
          for (int j : ord) {
            const auto [prec, r] = detail::gaussian_target(joint, q, j);
            const NormalFactor f{r / prec, 1.0 / prec};
            detail::ensure_updated(prec > 0 && std::isfinite(f.mean) && std::isfinite(f.var), static_cast<std::size_t>(j));
            q.factors[static_cast<std::size_t>(j)] = f;
          }
          q.elbo_trace.push_back(detail::gaussian_elbo(joint, q));
        } else {
          const auto st = detail::ng_stats(m);
          for (int j : ord) {
            if (j == 0) {
              const NormalFactor f = detail::ng_mu_target(m, st, q.gamma(1));
              detail::ensure_updated(f.var > 0 && std::isfinite(f.var), 0);
              q.factors[0] = f;
            } else {
              const GammaFactor f = detail::ng_tau_target(m, st, q.normal(0));
              detail::ensure_updated(f.rate > 0 && std::isfinite(f.rate), 1);
              q.factors[1] = f;
            }
          }
          q.elbo_trace.push_back(detail::ng_elbo(m, st, q.normal(0), q.gamma(1)));
        }
      },
      model);
  return q;
}

struct CaviConfig {
  double tol = 1e-10;
  int max_sweeps = 10000;
  bool random_order = false;
  std::uint64_t seed = 0;
};

/// Sweeps until |delta ELBO| <= tol or max_sweeps.
inline MeanFieldState cavi_fit(const VbModel& model, MeanFieldState init, const CaviConfig& cfg = {}) {
  require(cfg.max_sweeps >= 0, "max_sweeps must be nonnegative");
  MeanFieldState q = std::move(init);
  if (cfg.max_sweeps == 0) return q;
  if (q.elbo_trace.empty()) q.elbo_trace.push_back(elbo(model, q));
  Rng rng(cfg.seed);
  std::vector<int> ord(factor_count(model));
  std::iota(ord.begin(), ord.end(), 0);
  for (int s = 0; s < cfg.max_sweeps; ++s) {
    if (cfg.random_order) std::shuffle(ord.begin(), ord.end(), rng);
    q = cavi_sweep(model, std::move(q), ord);
    const double cur = q.elbo_trace.back(), prev = q.elbo_trace[q.elbo_trace.size() - 2];
    if (!std::isfinite(cur)) throw NumericError("ELBO became non-finite after sweep " + std::to_string(s + 1));
    if (std::abs(cur - prev) <= cfg.tol) break;
  }
  return q;
}

struct SviConfig {
  Eigen::Index batch_size = 100;
  StepSchedule schedule{1.0, 1.0, 0.7};
  std::int64_t n_iters = 1000;
  MeanFieldState init;  ///< empty factors means prior_state
};

/// Stochastic natural-parameter updates: each factor moves toward its CAVI target
/// computed from a minibatch with the N/n inflation, by step h_t.
inline MeanFieldState svi_fit(const VbModel& model, const SviConfig& cfg, std::uint64_t seed) {
  const auto& sch = cfg.schedule;
  if (!(sch.a > 0 && sch.b > 0) || !(sch.gamma == 0.0 || sch.robbins_monro()))
    throw ConfigError("SVI schedule needs a, b > 0 and gamma in (0.5, 1] (or 0 for a constant step)");
  require(cfg.n_iters >= 0, "iteration count must be nonnegative");
  MeanFieldState q = cfg.init.factors.empty() ? prior_state(model) : cfg.init;
  const std::size_t nf = factor_count(model);
  detail::check_domain(q, nf);
  Rng rng(seed);
  constexpr double kFloor = 1e-8;
  auto blend = [](double cur, double target, double h) { return (1 - h) * cur + h * target; };
  auto project = [&](double& x) {
    if (!(x > 0)) {
      x = kFloor;
      ++q.projections;
    }
  };

  std::visit(
      [&](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>) {
          detail::conjugate_or_throw(m);
          const Eigen::Index n_total = m.n_obs();
          require(cfg.batch_size >= 1 && cfg.batch_size <= n_total, "batch size must be in [1, N]");
          const double scale = static_cast<double>(n_total) / static_cast<double>(cfg.batch_size);
          const GaussianFactor joint = posterior_factor(m);
          q.elbo_trace.push_back(detail::gaussian_elbo(joint, q));
          for (std::int64_t t = 0; t < cfg.n_iters; ++t) {
            const double h = sch(t);
            GaussianFactor f = m.prior_factor();
            for (Eigen::Index i : draw_minibatch(n_total, cfg.batch_size, rng)) f += scale * m.datum_factor(i);
            for (std::size_t j = 0; j < nf; ++j) {
              const auto [prec, r] = detail::gaussian_target(f, q, static_cast<Eigen::Index>(j));
              const NormalFactor& cur = q.normal(j);
              double p = blend(1.0 / cur.var, prec, h);
              const double pm = blend(cur.mean / cur.var, r, h);
              project(p);
              q.factors[j] = NormalFactor{pm / p, 1.0 / p};
            }
            q.elbo_trace.push_back(detail::gaussian_elbo(joint, q));
          }
        } else {
          const Matrix& y = m.data().rows();
          const auto n_total = y.rows();
          require(cfg.batch_size >= 1 && cfg.batch_size <= n_total, "batch size must be in [1, N]");
          const double scale = static_cast<double>(n_total) / static_cast<double>(cfg.batch_size);
          const auto full = detail::ng_stats(m);
          q.elbo_trace.push_back(detail::ng_elbo(m, full, q.normal(0), q.gamma(1)));
          for (std::int64_t t = 0; t < cfg.n_iters; ++t) {
            const double h = sch(t);
            detail::NgStats st{static_cast<double>(n_total), 0, 0};
            for (Eigen::Index i : draw_minibatch(n_total, cfg.batch_size, rng)) {
              st.s1 += scale * y(i, 0);
              st.s2 += scale * y(i, 0) * y(i, 0);
            }
            {
              const NormalFactor tgt = detail::ng_mu_target(m, st, q.gamma(1));
              const NormalFactor& cur = q.normal(0);
              double p = blend(1.0 / cur.var, 1.0 / tgt.var, h);
              const double pm = blend(cur.mean / cur.var, tgt.mean / tgt.var, h);
              project(p);
              q.factors[0] = NormalFactor{pm / p, 1.0 / p};
            }
            {
              const GammaFactor tgt = detail::ng_tau_target(m, st, q.normal(0));
              const GammaFactor& cur = q.gamma(1);
              GammaFactor g{blend(cur.shape, tgt.shape, h), blend(cur.rate, tgt.rate, h)};
              project(g.shape);
              project(g.rate);
              q.factors[1] = g;
            }
            q.elbo_trace.push_back(detail::ng_elbo(m, full, q.normal(0), q.gamma(1)));
          }
        }
      },
      model);
  return q;
}

struct McElbo {
  double value = 0.0;
  double se = 0.0;
};

/// Monte Carlo E_Q[log p(X | theta)] plus the closed-form prior and entropy terms.
/// Works for any BayesModel (including logistic regression) with normal factors.
inline McElbo mc_elbo(const VbModel& model, const MeanFieldState& q, int n_draws, std::uint64_t seed) {
  require(n_draws >= 2, "mc_elbo needs at least 2 draws");
  detail::check_domain(q, factor_count(model));
  for (const auto& f : q.factors)
    if (const auto* nf = std::get_if<NormalFactor>(&f)) require(nf->var >= 1e-12, "factor variance below the 1e-12 floor");
  Rng rng(seed);
  std::vector<double> ll(static_cast<std::size_t>(n_draws));
  double closed = 0.0;
  std::visit(
      [&](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BayesModel>) {
          const GaussianPosterior g = mean_field_gaussian(q);
          for (auto& v : ll) v = m.log_likelihood(g.sample(rng));
          const double s2 = m.prior_scale() * m.prior_scale();
          for (Eigen::Index j = 0; j < g.dim(); ++j) {
            const double mj = g.mean()[j], vj = g.covariance()(j, j);
            closed -= 0.5 * (std::log(s2 / vj) + (vj + mj * mj) / s2 - 1.0);
          }
        } else {
          const NormalFactor& qm = q.normal(0);
          const GammaFactor& qt = q.gamma(1);
          std::normal_distribution<double> nd;
          std::gamma_distribution<double> gd(qt.shape, 1.0 / qt.rate);
          const Matrix& y = m.data().rows();
          for (auto& v : ll) {
            const double mu = qm.mean + std::sqrt(qm.var) * nd(rng);
            const double tau = gd(rng);
            v = 0.5 * m.n() * (std::log(tau) - kLog2Pi) - 0.5 * tau * (y.array() - mu).square().sum();
          }
          // remaining closed-form part: ELBO minus its expected log-likelihood term
          const detail::NgStats none{0, 0, 0};
          closed = detail::ng_elbo(m, none, qm, qt);
        }
      },
      model);
  double mean = 0, ss = 0;
  for (double v : ll) mean += v;
  mean /= n_draws;
  for (double v : ll) ss += (v - mean) * (v - mean);
  return {mean + closed, std::sqrt(ss / (n_draws - 1) / n_draws)};
}

// ---------------------------------------------------------------- adaptive VB

struct CollectionMember {
  std::string name;
  double alpha = 1.0;
  std::function<VbModel(const Dataset&)> build;
};

struct ModelCollection {
  std::vector<CollectionMember> members;

  void validate() const {
    require(!members.empty(), "model collection is empty");
    double s = 0;
    for (const auto& m : members) {
      require(m.alpha > 0, "model weight for '" + m.name + "' must be positive");
      require(static_cast<bool>(m.build), "model '" + m.name + "' has no builder");
      s += m.alpha;
    }
    require(std::abs(s - 1.0) <= 1e-12, "model weights must sum to 1");
  }
};

struct AdaptiveVbResult {
  std::vector<std::string> names;
  std::vector<MeanFieldState> fits;
  Vector gamma;  ///< posterior model weights
  Vector psi;    ///< -ELBO per model

  std::size_t best() const {
    Eigen::Index i;
    gamma.maxCoeff(&i);
    return static_cast<std::size_t>(i);
  }
};

/// Some members failed to fit; `partial` holds the members that did (gamma left empty).
class AdaptiveVbError : public NumericError {
 public:
  AdaptiveVbError(const std::string& msg, AdaptiveVbResult partial, std::vector<std::size_t> failed)
      : NumericError(msg), partial_(std::move(partial)), failed_(std::move(failed)) {}
  const AdaptiveVbResult& partial() const { return partial_; }
  const std::vector<std::size_t>& failed() const { return failed_; }

 private:
  AdaptiveVbResult partial_;
  std::vector<std::size_t> failed_;
};

/// gamma_m ∝ alpha_m exp(-psi_m), shifted by min psi before exponentiating.
/// Tied psi values return alpha / sum(alpha) exactly.
inline Vector model_weights(const Vector& alpha, const Vector& psi) {
  if (!psi.allFinite()) throw NumericError("model objective is not finite");
  const Vector w = alpha.array() * (-(psi.array() - psi.minCoeff())).exp();
  return w / w.sum();
}

inline AdaptiveVbResult adaptive_vb(const ModelCollection& collection, const Dataset& data, const CaviConfig& fit_cfg,
                                    int threads = 1) {
  collection.validate();
  const std::size_t k = collection.members.size();
  AdaptiveVbResult out;
  out.fits.resize(k);
  out.psi = Vector::Zero(static_cast<Eigen::Index>(k));
  std::vector<std::string> errors(k);
  parallel_for(k, threads, [&](std::size_t i) {
    try {
      const VbModel model = collection.members[i].build(data);
      out.fits[i] = cavi_fit(model, prior_state(model), fit_cfg);
      out.psi[static_cast<Eigen::Index>(i)] = -elbo(model, out.fits[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  Vector alpha(static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    out.names.push_back(collection.members[i].name);
    alpha[static_cast<Eigen::Index>(i)] = collection.members[i].alpha;
  }
  std::vector<std::size_t> failed;
  std::string msg = "adaptive VB: some member fits failed:";
  for (std::size_t i = 0; i < k; ++i)
    if (!errors[i].empty()) {
      failed.push_back(i);
      msg += " [" + collection.members[i].name + ": " + errors[i] + "]";
    }
  if (!failed.empty()) throw AdaptiveVbError(msg, std::move(out), std::move(failed));
  out.gamma = model_weights(alpha, out.psi);
  return out;
}

/// Columns 1, x, ..., x^degree of the first feature column; labels carried over.
inline Dataset polynomial_features(const Dataset& data, int degree) {
  require(degree >= 0, "polynomial degree must be nonnegative");
  const Matrix& x = data.rows();
  Matrix f(x.rows(), degree + 1);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    double p = 1.0;
    for (int j = 0; j <= degree; ++j, p *= x(n, 0)) f(n, j) = p;
  }
  return Dataset(f, data.labels());
}

/// Bayesian polynomial regressions of degree 0..max_degree with uniform model weights.
inline ModelCollection polynomial_collection(int max_degree, double noise_sd, double prior_scale) {
  require(max_degree >= 0, "max degree must be nonnegative");
  ModelCollection c;
  for (int d = 0; d <= max_degree; ++d)
    c.members.push_back({"degree-" + std::to_string(d), 1.0 / (max_degree + 1),
                         [d, noise_sd, prior_scale](const Dataset& data) -> VbModel {
                           return make_linear_regression(polynomial_features(data, d), noise_sd, prior_scale);
                         }});
  // weights must sum to 1 within 1e-12
  double s = 0;
  for (const auto& m : c.members) s += m.alpha;
  c.members.back().alpha += 1.0 - s;
  return c;
}

}  // namespace sbayes

#endif  // SBAYES_VARINF_HPP
