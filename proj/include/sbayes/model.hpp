#ifndef SBAYES_MODEL_HPP
#define SBAYES_MODEL_HPP

#include "sbayes/common.hpp"
#include "sbayes/dataset.hpp"
#include "sbayes/gaussian.hpp"

#include <functional>
#include <optional>
#include <variant>
#include <vector>

namespace sbayes {

/// Unnormalized target pi(x) ∝ exp(-U(x)) on R^D.
///
/// `log_normalizer`, when present, is log ∫ exp(-U), so the normalized
/// log density is -U(x) - log_normalizer.
struct TargetModel {
  Eigen::Index dim = 0;
  std::function<double(const Vector&)> potential;
  std::function<Vector(const Vector&)> grad_potential;
  std::optional<double> log_normalizer;

  double log_density(const Vector& x) const {
    return -potential(x) - log_normalizer.value_or(0.0);
  }
};

// Likelihood families. Each datum contributes f_n(theta) = log p(y_n | theta).
struct GaussianLocationLik {};  ///< y_n ~ N(theta, I_d)
struct LogisticLik {};          ///< y_n ~ Bernoulli(sigmoid(x_n' theta)), labels in {0,1}
struct GaussianLinearLik {      ///< y_n ~ N(x_n' theta, noise_sd^2)
  double noise_sd = 1.0;
};
using Likelihood = std::variant<GaussianLocationLik, LogisticLik, GaussianLinearLik>;

/// Prior N(0, prior_scale^2 I) times a product of per-datum likelihood terms.
class BayesModel {
 public:
  BayesModel(Likelihood lik, Dataset data, double prior_scale)
      : lik_(lik), data_(std::move(data)), prior_scale_(prior_scale), dim_(data_.obs_dim()) {
    require(prior_scale > 0, "prior scale must be positive");
  }

  Eigen::Index dim() const { return dim_; }
  Eigen::Index n_obs() const { return data_.n_obs(); }
  const Dataset& data() const { return data_; }
  const Likelihood& likelihood() const { return lik_; }
  double prior_scale() const { return prior_scale_; }

  /// Same model family bound to different data.
  BayesModel with_data(Dataset d) const { return BayesModel(lik_, std::move(d), prior_scale_); }

  bool is_conjugate() const { return !std::holds_alternative<LogisticLik>(lik_); }

  double log_prior(const Vector& t) const {
    const double s2 = prior_scale_ * prior_scale_;
    return -0.5 * static_cast<double>(dim_) * (kLog2Pi + std::log(s2)) - 0.5 * t.squaredNorm() / s2;
  }
  Vector grad_log_prior(const Vector& t) const { return -t / (prior_scale_ * prior_scale_); }

  double datum_loglik(const Vector& t, Eigen::Index n) const {
    return std::visit(
        [&](const auto& l) -> double {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, GaussianLocationLik>) {
            const Vector r = data_.row(n).transpose() - t;
            return -0.5 * static_cast<double>(dim_) * kLog2Pi - 0.5 * r.squaredNorm();
          } else if constexpr (std::is_same_v<L, LogisticLik>) {
            const double eta = data_.row(n).dot(t);
            return data_.label(n) * eta - softplus(eta);
          } else {
            const double s2 = l.noise_sd * l.noise_sd;
            const double r = data_.label(n) - data_.row(n).dot(t);
            return -0.5 * (kLog2Pi + std::log(s2)) - 0.5 * r * r / s2;
          }
        },
        lik_);
  }

  /// out += scale * grad_theta f_n(theta)
  void add_datum_grad(const Vector& t, Eigen::Index n, double scale, Vector& out) const {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, GaussianLocationLik>) {
            out += scale * (data_.row(n).transpose() - t);
          } else if constexpr (std::is_same_v<L, LogisticLik>) {
            const auto x = data_.row(n);
            out += (scale * (data_.label(n) - sigmoid(x.dot(t)))) * x.transpose();
          } else {
            const auto x = data_.row(n);
            const double s2 = l.noise_sd * l.noise_sd;
            out += (scale * (data_.label(n) - x.dot(t)) / s2) * x.transpose();
          }
        },
        lik_);
  }

  Vector datum_grad(const Vector& t, Eigen::Index n) const {
    Vector g = Vector::Zero(dim_);
    add_datum_grad(t, n, 1.0, g);
    return g;
  }

  double log_likelihood(const Vector& t) const {
    double s = 0;
    for (Eigen::Index n = 0; n < n_obs(); ++n) s += datum_loglik(t, n);
    return s;
  }

  /// Prior as a Gaussian factor (log density exactly).
  GaussianFactor prior_factor() const {
    const double s2 = prior_scale_ * prior_scale_;
    return {Matrix::Identity(dim_, dim_) / s2, Vector::Zero(dim_),
            -0.5 * static_cast<double>(dim_) * (kLog2Pi + std::log(s2))};
  }

  /// f_n as a Gaussian factor in theta; conjugate families only.
  GaussianFactor datum_factor(Eigen::Index n) const {
    return std::visit(
        [&](const auto& l) -> GaussianFactor {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, GaussianLocationLik>) {
            const Vector y = data_.row(n).transpose();
            return {Matrix::Identity(dim_, dim_), y,
                    -0.5 * static_cast<double>(dim_) * kLog2Pi - 0.5 * y.squaredNorm()};
          } else if constexpr (std::is_same_v<L, LogisticLik>) {
            throw UnsupportedModelError("logistic regression has no conjugate Gaussian form");
          } else {
            const Vector x = data_.row(n).transpose();
            const double y = data_.label(n);
            const double s2 = l.noise_sd * l.noise_sd;
            return {x * x.transpose() / s2, x * (y / s2), -0.5 * (kLog2Pi + std::log(s2)) - 0.5 * y * y / s2};
          }
        },
        lik_);
  }

 private:
  Likelihood lik_;
  Dataset data_;
  double prior_scale_;
  Eigen::Index dim_;
};

inline BayesModel make_gaussian_location(Eigen::Index d, const Dataset& data) {
  require(data.obs_dim() == d, "gaussian location: data rows have dimension " + std::to_string(data.obs_dim()) +
                                   ", expected " + std::to_string(d));
  return BayesModel(GaussianLocationLik{}, data, 1.0);
}

inline BayesModel make_logistic_regression(const Dataset& data, double prior_scale) {
  require(data.has_labels(), "logistic regression needs a label column 'y'");
  const Vector& y = data.labels();
  for (Eigen::Index n = 0; n < y.size(); ++n)
    require(y[n] == 0.0 || y[n] == 1.0, "logistic regression labels must be 0 or 1");
  return BayesModel(LogisticLik{}, data, prior_scale);
}

inline BayesModel make_linear_regression(const Dataset& data, double noise_sd, double prior_scale) {
  require(data.has_labels(), "linear regression needs a label column 'y'");
  require(noise_sd > 0, "noise sd must be positive");
  return BayesModel(GaussianLinearLik{noise_sd}, data, prior_scale);
}

/// Unnormalized log posterior  prior_power * log pi0 + sum_n w_n f_n  as a Gaussian factor.
/// An empty weight vector means w = 1.
inline GaussianFactor posterior_factor(const BayesModel& m, const Vector& weights = {}, double prior_power = 1.0) {
  if (!m.is_conjugate()) throw UnsupportedModelError("model is not conjugate");
  require(weights.size() == 0 || weights.size() == m.n_obs(), "weight vector length must equal N");
  GaussianFactor f = prior_power * m.prior_factor();
  for (Eigen::Index n = 0; n < m.n_obs(); ++n) {
    const double w = weights.size() ? weights[n] : 1.0;
    if (w != 0.0) f += w * m.datum_factor(n);
  }
  return f;
}

inline GaussianPosterior conjugate_posterior(const BayesModel& m, const Vector& weights = {}) {
  return posterior_factor(m, weights).normalized();
}

/// log p(Y) for conjugate models.
inline double log_evidence(const BayesModel& m) { return posterior_factor(m).log_integral(); }

/// U(theta) = -prior_power * log pi0(theta) - sum_n w_n f_n(theta).
/// Zero weights are skipped, so sparse coreset targets only touch their support.
inline TargetModel weighted_target(const BayesModel& m, const Vector& weights, double prior_power = 1.0) {
  require(weights.size() == m.n_obs(), "weight vector length must equal N");
  std::vector<Eigen::Index> support;
  std::vector<double> w;
  for (Eigen::Index n = 0; n < weights.size(); ++n) {
    require(weights[n] >= 0 && std::isfinite(weights[n]), "weights must be finite and nonnegative");
    if (weights[n] != 0.0) {
      support.push_back(n);
      w.push_back(weights[n]);
    }
  }
  TargetModel t;
  t.dim = m.dim();
  t.potential = [m, support, w, prior_power](const Vector& th) {
    double s = prior_power * m.log_prior(th);
    for (std::size_t i = 0; i < support.size(); ++i) s += w[i] * m.datum_loglik(th, support[i]);
    return -s;
  };
  t.grad_potential = [m, support, w, prior_power](const Vector& th) {
    Vector g = prior_power * m.grad_log_prior(th);
    for (std::size_t i = 0; i < support.size(); ++i) m.add_datum_grad(th, support[i], w[i], g);
    return Vector(-g);
  };
  if (m.is_conjugate()) t.log_normalizer = posterior_factor(m, weights, prior_power).log_integral();
  return t;
}

/// Full-data posterior target; log_normalizer is the log evidence for conjugate models.
inline TargetModel posterior_target(const BayesModel& m) { return weighted_target(m, Vector::Ones(m.n_obs())); }

/// Isotropic Gaussian mixture sum_k w_k N(mu_k, scale^2 I).
inline TargetModel make_gaussian_mixture_target(const std::vector<Vector>& means, const Vector& weights, double scale) {
  require(!means.empty(), "mixture needs at least one component");
  require(static_cast<Eigen::Index>(means.size()) == weights.size(), "one weight per component");
  require(std::abs(weights.sum() - 1.0) <= 1e-12, "mixture weights must sum to 1");
  require((weights.array() > 0).all(), "mixture weights must be positive");
  require(scale > 0, "mixture scale must be positive");
  const Eigen::Index d = means.front().size();
  for (const auto& mu : means) require(mu.size() == d, "all mixture means must share a dimension");
  const Vector logw = weights.array().log();
  const double s2 = scale * scale;

  auto component_logs = [means, logw, s2](const Vector& x) {
    Vector lc(logw.size());
    for (Eigen::Index k = 0; k < lc.size(); ++k)
      lc[k] = logw[k] - 0.5 * (x - means[static_cast<std::size_t>(k)]).squaredNorm() / s2;
    return lc;
  };
  TargetModel t;
  t.dim = d;
  t.potential = [component_logs](const Vector& x) { return -log_sum_exp(component_logs(x)); };
  t.grad_potential = [component_logs, means, s2](const Vector& x) {
    const Vector lc = component_logs(x);
    const Vector r = (lc.array() - log_sum_exp(lc)).exp();
    Vector g = Vector::Zero(x.size());
    for (Eigen::Index k = 0; k < r.size(); ++k) g += r[k] * (x - means[static_cast<std::size_t>(k)]) / s2;
    return g;
  };
  t.log_normalizer = 0.5 * static_cast<double>(d) * (kLog2Pi + std::log(s2));
  return t;
}

inline TargetModel make_standard_normal_target(Eigen::Index d) {
  return make_gaussian_mixture_target({Vector::Zero(d)}, Vector::Ones(1), 1.0);
}

}  // namespace sbayes

#endif  // SBAYES_MODEL_HPP
