#ifndef SBAYES_ADAPT_HPP
#define SBAYES_ADAPT_HPP

// Kernel adaptation: alternate sampling rounds with one optimizer update of the
// kernel parameters against a forward-KL or expected-squared-jump loss.

#include "sbayes/mcmc.hpp"

#include <cstring>
#include <deque>

namespace sbayes {

struct LossSpec {
  enum class Kind { kForwardKl, kEsjd };
  Kind kind = Kind::kForwardKl;
  double lambda = 1.0;

  static LossSpec forward_kl() { return {Kind::kForwardKl, 1.0}; }
  static LossSpec esjd(double lambda) {
    if (!(lambda > 0)) throw ConfigError("ESJD loss needs lambda > 0");
    return {Kind::kEsjd, lambda};
  }
};

struct LossValue {
  double value = 0.0;
  Vector grad;
};

/// -mean log q(x_i) over the buffer, with its parameter gradient.
inline LossValue forward_kl_loss(const ComposedFlow& flow, const Matrix& buffer) {
  require(buffer.rows() > 0, "forward-KL loss needs a nonempty buffer");
  double s = 0.0;
  for (Eigen::Index i = 0; i < buffer.rows(); ++i) s -= flow.log_density(buffer.row(i).transpose());
  return {s / static_cast<double>(buffer.rows()), flow.param_grad_neg_logdensity(buffer)};
}

struct EsjdValue {
  double value = 0.0;
  double lag = 0.0;
  bool degenerate = false;  ///< lag == 0; value is +inf
};

namespace detail {
inline std::uint64_t hash_point(const Vector& x) {
  std::uint64_t h = 1469598103934665603ull;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &x[i], sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}
}  // namespace detail

/// Squared jump estimate with one fresh proposal per buffer point, lambda/lag - lag/lambda.
/// Each point's proposal stream is keyed by (seed, point), so the estimate does not depend
/// on buffer order and repeated calls with one seed use common random numbers.
inline EsjdValue esjd_loss(const AnyKernel& k, const TargetModel& target, const Matrix& buffer, double lambda,
                           std::uint64_t seed) {
  require(buffer.rows() > 0, "ESJD loss needs a nonempty buffer");
  if (!(lambda > 0)) throw ConfigError("ESJD loss needs lambda > 0");
  std::int64_t step = 0;
  if (const auto* m = std::get_if<MixtureKernel>(&k)) step = m->local_per_global;  // score the global move
  double lag = 0.0;
  for (Eigen::Index i = 0; i < buffer.rows(); ++i) {
    ChainState s;
    s.x = buffer.row(i).transpose();
    s.potential = target.potential(s.x);
    s.step_index = step;
    Rng rng(derive_seed(seed, detail::hash_point(s.x)));
    const Proposal p = propose(k, target, s, rng);
    if (p.divergent || p.nonfinite) continue;
    lag += (p.x - s.x).squaredNorm() * std::min(1.0, std::exp(p.log_alpha));
  }
  lag /= static_cast<double>(buffer.rows());
  if (lag == 0.0) return {std::numeric_limits<double>::infinity(), 0.0, true};
  return {lambda / lag - lag / lambda, lag, false};
}

// ---------------------------------------------------------------- kernel parameters

inline Vector kernel_params(const AnyKernel& k) {
  return std::visit(
      [](const auto& kk) -> Vector {
        using T = std::decay_t<decltype(kk)>;
        if constexpr (std::is_same_v<T, HmcKernel> || std::is_same_v<T, MalaKernel>)
          return Vector::Constant(1, std::log(kk.eps));
        else if constexpr (std::is_same_v<T, IndependentFlowKernel>) return kk.flow.params();
        else if constexpr (std::is_same_v<T, MixtureKernel>) return kk.global.flow.params();
        else if constexpr (std::is_same_v<T, AugmentedHmcKernel>) return kk.params();
        else throw ConfigError("the involutive kernel has no adaptable parameters");
      },
      k);
}

inline AnyKernel with_kernel_params(const AnyKernel& k, const Vector& p) {
  return std::visit(
      [&](const auto& kk) -> AnyKernel {
        using T = std::decay_t<decltype(kk)>;
        if constexpr (std::is_same_v<T, HmcKernel>) return HmcKernel(std::exp(p[0]), kk.n_leapfrog);
        else if constexpr (std::is_same_v<T, MalaKernel>) return MalaKernel(std::exp(p[0]));
        else if constexpr (std::is_same_v<T, IndependentFlowKernel>)
          return IndependentFlowKernel{ComposedFlow::from_params(kk.flow.dim(), kk.flow.n_layers(), p)};
        else if constexpr (std::is_same_v<T, MixtureKernel>) {
          MixtureKernel m = kk;
          m.global.flow = ComposedFlow::from_params(kk.global.flow.dim(), kk.global.flow.n_layers(), p);
          return m;
        } else if constexpr (std::is_same_v<T, AugmentedHmcKernel>) return kk.with_params(p);
        else throw ConfigError("the involutive kernel has no adaptable parameters");
      },
      k);
}

inline const ComposedFlow* density_flow(const AnyKernel& k) {
  if (const auto* i = std::get_if<IndependentFlowKernel>(&k)) return &i->flow;
  if (const auto* m = std::get_if<MixtureKernel>(&k)) return &m->global.flow;
  return nullptr;
}

// ---------------------------------------------------------------- optimizer and loop

struct Adam {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m, v;
  int t = 0;

  Vector step(const Vector& params, const Vector& grad) {
    if (m.size() != params.size()) {
      m = Vector::Zero(params.size());
      v = Vector::Zero(params.size());
    }
    ++t;
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(beta1, t);
    const double c2 = 1 - std::pow(beta2, t);
    return params.array() - lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

struct AdaptConfig {
  int steps_per_round = 50;          ///< B sampler steps per chain between updates
  std::vector<Vector> inits;         ///< one chain per start point; empty means one chain at the origin
  double learning_rate = 1e-2;
  int batch_size = 256;              ///< buffer subsample per update
  double fd_step = 1e-4;             ///< central-difference step for ESJD gradients
  std::size_t buffer_capacity = 4096;
  std::uint64_t seed = 0;
};

struct AdaptResult {
  AnyKernel kernel;
  std::vector<Chain> chains;
  std::vector<double> loss_trace;
};

class AdaptError : public NumericError {
 public:
  AdaptError(const std::string& msg, std::vector<double> trace) : NumericError(msg), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

/// Central differences with common random numbers. Parameters that provably cannot move the
/// kernel (inert perceptron weights) have an exactly zero difference and are skipped.
inline Vector esjd_fd_gradient(const AnyKernel& k, const TargetModel& target, const Matrix& batch, double lambda,
                               std::uint64_t seed, double h) {
  const Vector p = kernel_params(k);
  std::vector<bool> inert(static_cast<std::size_t>(p.size()), false);
  if (const auto* a = std::get_if<AugmentedHmcKernel>(&k)) inert = a->inert_params();
  Vector g = Vector::Zero(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (inert[static_cast<std::size_t>(i)]) continue;
    Vector pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    const double fp = esjd_loss(with_kernel_params(k, pp), target, batch, lambda, seed).value;
    const double fm = esjd_loss(with_kernel_params(k, pm), target, batch, lambda, seed).value;
    g[i] = std::isfinite(fp) && std::isfinite(fm) ? (fp - fm) / (2 * h) : 0.0;
  }
  return g;
}

/// Alternates B steps per chain with one optimizer update. Forward KL needs a kernel
/// with a flow density (independent or mixture); ESJD accepts any parametric kernel.
inline AdaptResult adapt(const AnyKernel& initial, const TargetModel& target, const LossSpec& loss, int n_rounds,
                         const AdaptConfig& cfg) {
  if (n_rounds < 0 || cfg.steps_per_round < 1 || cfg.batch_size < 1 || cfg.buffer_capacity < 1)
    throw ConfigError("invalid adaptation configuration");
  if (loss.kind == LossSpec::Kind::kForwardKl && !density_flow(initial))
    throw ConfigError("forward-KL adaptation requires an independent or mixture flow kernel");
  Vector params = kernel_params(initial);  // validates that the kernel is parametric

  std::vector<Vector> inits = cfg.inits;
  if (inits.empty()) inits.push_back(Vector::Zero(target.dim));
  std::vector<ChainState> states;
  for (std::size_t c = 0; c < inits.size(); ++c)
    states.push_back(ChainState::start(target, inits[c], derive_seed(cfg.seed, c)));

  AdaptResult out{initial, std::vector<Chain>(inits.size()), {}};
  for (auto& ch : out.chains) ch.draws.resize(0, target.dim);
  std::vector<std::vector<Vector>> draws(inits.size());
  std::deque<Vector> buffer;
  Rng opt_rng(derive_seed(cfg.seed, 0x6f7074ull));
  Adam adam;
  adam.lr = cfg.learning_rate;

  for (int round = 0; round < n_rounds; ++round) {
    for (std::size_t c = 0; c < states.size(); ++c) {
      for (int t = 0; t < cfg.steps_per_round; ++t) {
        out.chains[c].records.push_back(mh_step(out.kernel, target, states[c]));
        draws[c].push_back(states[c].x);
        buffer.push_back(states[c].x);
        if (buffer.size() > cfg.buffer_capacity) buffer.pop_front();
      }
    }
    const Eigen::Index n = std::min<Eigen::Index>(static_cast<Eigen::Index>(buffer.size()), cfg.batch_size);
    Matrix batch(n, target.dim);
    if (n == static_cast<Eigen::Index>(buffer.size())) {
      for (Eigen::Index i = 0; i < n; ++i) batch.row(i) = buffer[static_cast<std::size_t>(i)].transpose();
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
      for (Eigen::Index i = 0; i < n; ++i) batch.row(i) = buffer[pick(opt_rng)].transpose();
    }

    double value;
    Vector grad;
    if (loss.kind == LossSpec::Kind::kForwardKl) {
      LossValue lv = forward_kl_loss(*density_flow(out.kernel), batch);
      value = lv.value;
      grad = std::move(lv.grad);
    } else {
      const std::uint64_t s = opt_rng();
      value = esjd_loss(out.kernel, target, batch, loss.lambda, s).value;
      if (std::isfinite(value)) grad = esjd_fd_gradient(out.kernel, target, batch, loss.lambda, s, cfg.fd_step);
    }
    out.loss_trace.push_back(value);
    if (!std::isfinite(value) || !grad.allFinite())
      throw AdaptError("adaptation loss is not finite at round " + std::to_string(round), out.loss_trace);
    params = adam.step(params, grad);
    if (!params.allFinite()) throw AdaptError("adapted parameters are not finite", out.loss_trace);
    out.kernel = with_kernel_params(out.kernel, params);
  }

  for (std::size_t c = 0; c < states.size(); ++c) {
    out.chains[c].draws.resize(static_cast<Eigen::Index>(draws[c].size()), target.dim);
    for (std::size_t t = 0; t < draws[c].size(); ++t)
      out.chains[c].draws.row(static_cast<Eigen::Index>(t)) = draws[c][t].transpose();
  }
  return out;
}

}  // namespace sbayes

#endif  // SBAYES_ADAPT_HPP
