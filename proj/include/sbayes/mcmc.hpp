#ifndef SBAYES_MCMC_HPP
#define SBAYES_MCMC_HPP

// Metropolis-Hastings kernels over a TargetModel.
//
// Every kernel exposes a proposal (new point plus log acceptance ratio) and
// shares one accept/reject step, so chains are pure functions of the kernel,
// the target and the state's rng stream.

#include "sbayes/common.hpp"
#include "sbayes/flow.hpp"
#include "sbayes/model.hpp"

#include <array>
#include <variant>
#include <vector>

namespace sbayes {

inline constexpr double kDivergenceThreshold = 1000.0;

struct ChainState {
  Vector x;
  double potential = 0.0;  ///< U(x)
  std::int64_t step_index = 0;
  Rng rng;
  double cached_logq = std::numeric_limits<double>::quiet_NaN();  ///< flow log density at x, NaN if unknown

  static ChainState start(const TargetModel& target, Vector x0, std::uint64_t seed) {
    require(x0.size() == target.dim, "initial point has wrong dimension");
    ChainState s;
    s.potential = target.potential(x0);
    if (!std::isfinite(s.potential)) throw NumericError("potential is not finite at the initial point");
    s.x = std::move(x0);
    s.rng.seed(seed);
    return s;
  }
};

struct Proposal {
  Vector x;
  double potential = 0.0;
  double log_alpha = -std::numeric_limits<double>::infinity();
  bool divergent = false;
  bool nonfinite = false;
  double logq = std::numeric_limits<double>::quiet_NaN();          ///< flow log density at the proposal
  double logq_current = std::numeric_limits<double>::quiet_NaN();  ///< flow log density at the current point
};

struct StepRecord {
  std::int64_t step = 0;
  bool accepted = false;
  double log_alpha = 0.0;
  bool divergent = false;
  bool nonfinite = false;
};

// ---------------------------------------------------------------- HMC

struct HmcKernel {
  double eps = 0.1;
  int n_leapfrog = 10;

  HmcKernel() = default;
  HmcKernel(double step, int steps) : eps(step), n_leapfrog(steps) {
    if (!(step > 0) || steps < 1) throw ConfigError("HMC needs eps > 0 and L >= 1");
  }
};

struct PhaseState {
  Vector x;
  Vector v;
};

/// L leapfrog steps with signed step size; each step is half momentum, full position, half momentum.
inline PhaseState leapfrog(const TargetModel& target, PhaseState s, double signed_eps, int n_steps) {
  const double half = 0.5 * signed_eps;
  Vector g = target.grad_potential(s.x);
  for (int l = 0; l < n_steps; ++l) {
    s.v = s.v - half * g;
    s.x = s.x + signed_eps * s.v;
    g = target.grad_potential(s.x);
    s.v = s.v - half * g;
  }
  return s;
}

namespace detail {

inline Proposal finish_hamiltonian(const TargetModel& target, const Vector& x, double u0, const Vector& v0,
                                   const PhaseState& end, double logdet) {
  Proposal p;
  p.x = end.x;
  p.potential = target.potential(end.x);
  const double h0 = u0 + 0.5 * v0.squaredNorm();
  const double h1 = p.potential + 0.5 * end.v.squaredNorm();
  const double log_alpha = (h0 - h1) + logdet;
  if (!std::isfinite(log_alpha) || !end.x.allFinite()) {
    p.nonfinite = p.divergent = true;
    p.log_alpha = -std::numeric_limits<double>::infinity();
  } else if (std::abs(h1 - h0) > kDivergenceThreshold) {
    p.divergent = true;
    p.log_alpha = -std::numeric_limits<double>::infinity();
  } else {
    p.log_alpha = log_alpha;
  }
  (void)x;
  return p;
}

/// Momentum then a direction bit. The direction makes the (augmented) map an involution;
/// for plain HMC it is distributionally a no-op since the momentum is symmetric.
inline std::pair<Vector, int> draw_momentum_and_direction(Eigen::Index d, Rng& rng) {
  Vector v = standard_normal_vector(d, rng);
  const int dir = uniform01(rng) < 0.5 ? -1 : 1;
  return {std::move(v), dir};
}

}  // namespace detail

inline Proposal hmc_propose(const HmcKernel& k, const TargetModel& target, const Vector& x, double u0, Rng& rng) {
  auto [v0, dir] = detail::draw_momentum_and_direction(target.dim, rng);
  const PhaseState end = leapfrog(target, {x, v0}, dir * k.eps, k.n_leapfrog);
  return detail::finish_hamiltonian(target, x, u0, v0, end, 0.0);
}

// ---------------------------------------------------------------- MALA

struct MalaKernel {
  double eps = 0.5;

  MalaKernel() = default;
  explicit MalaKernel(double step) : eps(step) {
    if (!(step > 0)) throw ConfigError("MALA needs eps > 0");
  }
};

/// Langevin proposal x' = x - (eps^2/2) grad U(x) + eps xi with the proposal-density correction.
inline Proposal mala_propose(const MalaKernel& k, const TargetModel& target, const Vector& x, double u0, Rng& rng) {
  const double e2 = k.eps * k.eps;
  const Vector g0 = target.grad_potential(x);
  Proposal p;
  p.x = x - 0.5 * e2 * g0 + k.eps * standard_normal_vector(target.dim, rng);
  p.potential = target.potential(p.x);
  const Vector g1 = target.grad_potential(p.x);
  const double log_fwd = -(p.x - x + 0.5 * e2 * g0).squaredNorm() / (2 * e2);
  const double log_bwd = -(x - p.x + 0.5 * e2 * g1).squaredNorm() / (2 * e2);
  const double la = (u0 - p.potential) + (log_bwd - log_fwd);
  if (!std::isfinite(la)) {
    p.nonfinite = p.divergent = true;
    p.log_alpha = -std::numeric_limits<double>::infinity();
  } else {
    p.log_alpha = la;
  }
  return p;
}

// ---------------------------------------------------------------- independent flow proposal

struct IndependentFlowKernel {
  ComposedFlow flow;
};

/// log acceptance  log[pi(x') q(x)] - log[pi(x) q(x')]  from cached quantities.
inline double independent_log_accept(double u_x, double logq_x, double u_prop, double logq_prop) {
  return (-u_prop + logq_x) - (-u_x + logq_prop);
}

inline Proposal independent_propose(const IndependentFlowKernel& k, const TargetModel& target, const Vector& x,
                                    double u0, double cached_logq, Rng& rng) {
  require(k.flow.dim() == target.dim, "flow and target dimensions differ");
  const double logq_x = std::isnan(cached_logq) ? k.flow.log_density(x) : cached_logq;
  const Vector z = standard_normal_vector(target.dim, rng);
  const FlowOutput f = k.flow.forward(z);
  Proposal p;
  p.x = f.y;
  p.logq = log_std_normal(z) - f.logdet;
  p.logq_current = logq_x;
  p.potential = target.potential(p.x);
  const double la = independent_log_accept(u0, logq_x, p.potential, p.logq);
  if (!std::isfinite(la)) {
    p.nonfinite = true;
    p.log_alpha = -std::numeric_limits<double>::infinity();
  } else {
    p.log_alpha = la;
  }
  return p;
}

// ---------------------------------------------------------------- involutive (volume-preserving) flow proposal

/// Dependent proposal from a volume-preserving flow on R^{D+M}: x' is the x-block of
/// f(x, z) or f^{-1}(x, z) with equal probability, z ~ N(0, I_M).
class InvolutiveFlowKernel {
 public:
  InvolutiveFlowKernel(ComposedFlow flow, Eigen::Index state_dim, std::uint64_t probe_seed = 0)
      : flow_(std::move(flow)), d_(state_dim) {
    if (flow_.dim() <= d_) throw ConfigError("involutive flow must act on R^{D+M} with M >= 1");
    Rng rng(probe_seed);
    for (int i = 0; i < 32; ++i) {
      const Vector p = 2.0 * standard_normal_vector(flow_.dim(), rng);
      if (std::abs(flow_.forward(p).logdet) > 1e-8)
        throw ConfigError("involutive kernel requires a volume-preserving flow");
    }
  }

  const ComposedFlow& flow() const { return flow_; }
  Eigen::Index state_dim() const { return d_; }
  Eigen::Index noise_dim() const { return flow_.dim() - d_; }

  /// Accepts with the joint ratio pi(x')N(z')/(pi(x)N(z)); this is pi(x')/pi(x)
  /// whenever the flow leaves the noise norm unchanged.
  Proposal propose(const TargetModel& target, const Vector& x, double u0, Rng& rng) const {
    const Eigen::Index m = noise_dim();
    Vector joint(flow_.dim());
    joint.head(d_) = x;
    joint.tail(m) = standard_normal_vector(m, rng);
    const bool fwd = uniform01(rng) > 0.5;
    const Vector out = fwd ? flow_.forward(joint).y : flow_.inverse(joint);
    Proposal p;
    p.x = out.head(d_);
    p.potential = target.potential(p.x);
    const double la = (u0 + 0.5 * joint.tail(m).squaredNorm()) - (p.potential + 0.5 * out.tail(m).squaredNorm());
    if (!std::isfinite(la)) {
      p.nonfinite = true;
      p.log_alpha = -std::numeric_limits<double>::infinity();
    } else {
      p.log_alpha = la;
    }
    return p;
  }

 private:
  ComposedFlow flow_;
  Eigen::Index d_;
};

/// Volume-preserving shears on R^{D+M}: each layer shifts the x-block by a tanh of a projection
/// of the noise block, so w'a = 0, the Jacobian has determinant one and z passes through unchanged.
inline ComposedFlow make_shear_flow(Eigen::Index state_dim, Eigen::Index noise_dim, std::size_t n_layers, double scale,
                                    Rng& rng) {
  const Eigen::Index n = state_dim + noise_dim;
  std::vector<PlanarLayer> ls;
  for (std::size_t k = 0; k < n_layers; ++k) {
    PlanarLayer l{Vector::Zero(n), Vector::Zero(n), standard_normal_vector(1, rng)[0]};
    l.a.head(state_dim) = scale * standard_normal_vector(state_dim, rng);
    l.w.tail(noise_dim) = standard_normal_vector(noise_dim, rng);
    ls.push_back(std::move(l));
  }
  return ComposedFlow(n, std::move(ls));
}

// ---------------------------------------------------------------- augmented HMC

/// One-hidden-layer tanh perceptron R^D -> R^D; all-zero parameters give the zero map.
class Perceptron {
 public:
  static constexpr Eigen::Index kWidth = 16;

  Perceptron() = default;
  explicit Perceptron(Eigen::Index dim) : dim_(dim), params_(Vector::Zero(param_count(dim))) {}
  Perceptron(Eigen::Index dim, Vector params) : dim_(dim), params_(std::move(params)) {
    require(params_.size() == param_count(dim), "perceptron parameter vector has wrong length");
  }

  static Eigen::Index param_count(Eigen::Index dim) { return kWidth * dim + kWidth + dim * kWidth + dim; }

  const Vector& params() const { return params_; }
  Eigen::Index dim() const { return dim_; }

  /// Parameters that cannot change the output when moved alone: the input weights of a hidden
  /// unit whose output column is zero, and the output column of a unit that is identically zero.
  std::vector<bool> inert_params() const {
    const Eigen::Index h = kWidth, d = dim_;
    const auto w1 = Eigen::Map<const Matrix>(params_.data(), h, d);
    const auto b1 = params_.segment(h * d, h);
    const auto w2 = Eigen::Map<const Matrix>(params_.data() + h * d + h, d, h);
    std::vector<bool> inert(static_cast<std::size_t>(params_.size()), false);
    for (Eigen::Index j = 0; j < h; ++j) {
      if ((w2.col(j).array() == 0).all()) {
        for (Eigen::Index i = 0; i < d; ++i) inert[static_cast<std::size_t>(i * h + j)] = true;
        inert[static_cast<std::size_t>(h * d + j)] = true;
      }
      if ((w1.row(j).array() == 0).all() && b1[j] == 0)
        for (Eigen::Index i = 0; i < d; ++i) inert[static_cast<std::size_t>(h * d + h + j * d + i)] = true;
    }
    return inert;
  }

  Vector operator()(const Vector& in) const {
    const Eigen::Index h = kWidth, d = dim_;
    const double* w1 = params_.data();  // h x d, column-major
    const double* b1 = w1 + h * d;
    const double* w2 = b1 + h;  // d x h, column-major
    const double* b2 = w2 + d * h;
    Vector out = Eigen::Map<const Vector>(b2, d);
    for (Eigen::Index j = 0; j < h; ++j) {
      double a = b1[j];
      for (Eigen::Index i = 0; i < d; ++i) a += w1[i * h + j] * in[i];
      const double t = std::tanh(a);
      if (t == 0.0) continue;
      for (Eigen::Index i = 0; i < d; ++i) out[i] += w2[j * d + i] * t;
    }
    return out;
  }

 private:
  Eigen::Index dim_ = 0;
  Vector params_;
};

/// HMC whose momentum and position updates are rescaled and translated by learned maps:
///   v_half = exp(S_v(x)) * v - eps/2 exp(Q_v(x)) * grad U(x) + T_v(x)
///   x'     = exp(S_x(v_half)) * x + eps exp(Q_x(v_half)) * v_half + T_x(v_half)
/// followed by the momentum update again at x'. All maps zero reproduces HMC.
struct AugmentedHmcKernel {
  enum Map { kSv = 0, kQv, kTv, kSx, kQx, kTx };

  HmcKernel base;
  std::array<Perceptron, 6> maps;

  static AugmentedHmcKernel zero(HmcKernel base, Eigen::Index dim) {
    AugmentedHmcKernel k{base, {}};
    for (auto& m : k.maps) m = Perceptron(dim);
    return k;
  }

  Eigen::Index dim() const { return maps[0].dim(); }

  Vector params() const {
    const Eigen::Index n = Perceptron::param_count(dim());
    Vector p(6 * n);
    for (int i = 0; i < 6; ++i) p.segment(i * n, n) = maps[static_cast<std::size_t>(i)].params();
    return p;
  }

  std::vector<bool> inert_params() const {
    std::vector<bool> all;
    for (const auto& m : maps) {
      const auto f = m.inert_params();
      all.insert(all.end(), f.begin(), f.end());
    }
    return all;
  }

  AugmentedHmcKernel with_params(const Vector& p) const {
    const Eigen::Index n = Perceptron::param_count(dim());
    require(p.size() == 6 * n, "augmented HMC parameter vector has wrong length");
    AugmentedHmcKernel k = *this;
    for (int i = 0; i < 6; ++i) k.maps[static_cast<std::size_t>(i)] = Perceptron(dim(), p.segment(i * n, n));
    return k;
  }
};

struct AugmentedTransition {
  PhaseState end;
  double logdet = 0.0;
};

/// Deterministic L-step map (direction +1) or its exact inverse (direction -1), with log|det J|.
inline AugmentedTransition augmented_map(const AugmentedHmcKernel& k, const TargetModel& target, PhaseState s,
                                         int direction) {
  const auto& m = k.maps;
  const double eps = k.base.eps;
  const double half = 0.5 * eps;
  using K = AugmentedHmcKernel;
  AugmentedTransition out;
  Vector g = target.grad_potential(s.x);
  // momentum maps at the current position, reused by the next step's first half kick
  Vector sv = m[K::kSv](s.x), qv = m[K::kQv](s.x), tv = m[K::kTv](s.x);
  auto refresh = [&](const Vector& x) {
    sv = m[K::kSv](x);
    qv = m[K::kQv](x);
    tv = m[K::kTv](x);
  };
  auto half_kick = [&](const Vector& v, const Vector& grad) {
    out.logdet += sv.sum();
    return Vector(sv.array().exp() * v.array() - half * (qv.array().exp() * grad.array()) + tv.array());
  };
  auto half_kick_inverse = [&](const Vector& v, const Vector& grad) {
    out.logdet -= sv.sum();
    return Vector((-sv.array()).exp() * (v.array() + half * (qv.array().exp() * grad.array()) - tv.array()));
  };
  for (int l = 0; l < k.base.n_leapfrog; ++l) {
    const Vector vh = direction > 0 ? half_kick(s.v, g) : half_kick_inverse(s.v, g);
    const Vector sx = m[K::kSx](vh);
    if (direction > 0) {
      out.logdet += sx.sum();
      s.x = sx.array().exp() * s.x.array() + eps * (m[K::kQx](vh).array().exp() * vh.array()) + m[K::kTx](vh).array();
    } else {
      out.logdet -= sx.sum();
      s.x = (-sx.array()).exp() * (s.x.array() - eps * (m[K::kQx](vh).array().exp() * vh.array()) - m[K::kTx](vh).array());
    }
    g = target.grad_potential(s.x);
    refresh(s.x);
    s.v = direction > 0 ? half_kick(vh, g) : half_kick_inverse(vh, g);
  }
  out.end = std::move(s);
  return out;
}

inline Proposal aug_hmc_propose(const AugmentedHmcKernel& k, const TargetModel& target, const Vector& x, double u0,
                                Rng& rng) {
  require(k.dim() == target.dim, "augmented kernel and target dimensions differ");
  auto [v0, dir] = detail::draw_momentum_and_direction(target.dim, rng);
  const AugmentedTransition t = augmented_map(k, target, {x, v0}, dir);
  return detail::finish_hamiltonian(target, x, u0, v0, t.end, t.logdet);
}

// ---------------------------------------------------------------- mixtures

using LocalKernel = std::variant<MalaKernel, HmcKernel, IndependentFlowKernel>;

/// r local steps, then one independent-flow step, repeating.
struct MixtureKernel {
  LocalKernel local;
  IndependentFlowKernel global;
  int local_per_global = 10;

  MixtureKernel(LocalKernel l, IndependentFlowKernel g, int r) : local(std::move(l)), global(std::move(g)), local_per_global(r) {
    if (r < 1) throw ConfigError("mixture kernel needs at least one local step per global step");
  }

  bool is_global_step(std::int64_t step) const { return (step + 1) % (local_per_global + 1) == 0; }
};

using AnyKernel =
    std::variant<HmcKernel, MalaKernel, IndependentFlowKernel, InvolutiveFlowKernel, AugmentedHmcKernel, MixtureKernel>;

inline Proposal propose(const LocalKernel& k, const TargetModel& target, const ChainState& s, Rng& rng) {
  return std::visit(
      [&](const auto& kk) -> Proposal {
        using T = std::decay_t<decltype(kk)>;
        if constexpr (std::is_same_v<T, MalaKernel>) return mala_propose(kk, target, s.x, s.potential, rng);
        else if constexpr (std::is_same_v<T, HmcKernel>) return hmc_propose(kk, target, s.x, s.potential, rng);
        else return independent_propose(kk, target, s.x, s.potential, s.cached_logq, rng);
      },
      k);
}

/// Proposal from `s` using `rng` (which need not be the state's own stream).
inline Proposal propose(const AnyKernel& k, const TargetModel& target, const ChainState& s, Rng& rng) {
  return std::visit(
      [&](const auto& kk) -> Proposal {
        using T = std::decay_t<decltype(kk)>;
        if constexpr (std::is_same_v<T, HmcKernel>) return hmc_propose(kk, target, s.x, s.potential, rng);
        else if constexpr (std::is_same_v<T, MalaKernel>) return mala_propose(kk, target, s.x, s.potential, rng);
        else if constexpr (std::is_same_v<T, IndependentFlowKernel>)
          return independent_propose(kk, target, s.x, s.potential, s.cached_logq, rng);
        else if constexpr (std::is_same_v<T, InvolutiveFlowKernel>) return kk.propose(target, s.x, s.potential, rng);
        else if constexpr (std::is_same_v<T, AugmentedHmcKernel>) return aug_hmc_propose(kk, target, s.x, s.potential, rng);
        else {
          if (kk.is_global_step(s.step_index))
            return independent_propose(kk.global, target, s.x, s.potential, s.cached_logq, rng);
          return propose(kk.local, target, s, rng);
        }
      },
      k);
}

/// One MH transition; non-finite or divergent proposals are rejected and flagged.
inline StepRecord mh_step(const AnyKernel& k, const TargetModel& target, ChainState& s) {
  Proposal p = propose(k, target, s, s.rng);
  StepRecord r{s.step_index, false, p.log_alpha, p.divergent, p.nonfinite};
  const double u = uniform01(s.rng);
  if (!p.nonfinite && !p.divergent && std::log(u) < p.log_alpha) {
    r.accepted = true;
    s.x = std::move(p.x);
    s.potential = p.potential;
    s.cached_logq = p.logq;
  } else if (!std::isnan(p.logq_current)) {
    s.cached_logq = p.logq_current;
  }
  ++s.step_index;
  return r;
}

inline StepRecord mh_step_independent(const IndependentFlowKernel& k, const TargetModel& target, ChainState& s) {
  return mh_step(AnyKernel{k}, target, s);
}

struct Chain {
  Matrix draws;  ///< one row per step, the state after the step
  std::vector<StepRecord> records;

  double acceptance_rate() const {
    if (records.empty()) return 0.0;
    double a = 0;
    for (const auto& r : records) a += r.accepted;
    return a / static_cast<double>(records.size());
  }
  std::size_t divergences() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.divergent;
    return n;
  }
};

inline Chain run_chain(const AnyKernel& k, const TargetModel& target, ChainState& s, std::int64_t n_steps) {
  Chain c{Matrix(n_steps, target.dim), {}};
  c.records.reserve(static_cast<std::size_t>(n_steps));
  for (std::int64_t t = 0; t < n_steps; ++t) {
    c.records.push_back(mh_step(k, target, s));
    c.draws.row(t) = s.x.transpose();
  }
  return c;
}

// ---------------------------------------------------------------- step-size-tuned HMC

struct TunedHmcConfig {
  double initial_eps = 0.1;
  int n_leapfrog = 10;
  int n_warmup = 500;
  int n_samples = 1000;
  double accept_low = 0.6;
  double accept_high = 0.8;
};

struct TunedHmcRun {
  Matrix draws;
  double eps = 0.0;
  double accept_rate = 0.0;
  std::size_t warmup_divergences = 0;
  std::size_t divergences = 0;  ///< sampling phase only
  std::size_t n_samples = 0;
  Vector last;

  double divergence_rate() const { return n_samples ? static_cast<double>(divergences) / n_samples : 0.0; }
};

/// HMC whose warmup tunes eps by dual averaging toward the middle of [accept_low, accept_high],
/// followed by a fixed-eps sampling phase.
inline TunedHmcRun run_tuned_hmc(const TargetModel& target, const Vector& x0, const TunedHmcConfig& cfg,
                                 std::uint64_t seed) {
  ChainState s = ChainState::start(target, x0, seed);
  const double goal = 0.5 * (cfg.accept_low + cfg.accept_high);
  const double mu = std::log(10 * cfg.initial_eps);
  constexpr double kGamma = 0.05, kT0 = 10, kKappa = 0.75;
  double log_eps = std::log(cfg.initial_eps), log_eps_bar = log_eps, h_bar = 0.0;
  TunedHmcRun out;
  for (int t = 1; t <= cfg.n_warmup; ++t) {
    const StepRecord r = mh_step(HmcKernel(std::exp(log_eps), cfg.n_leapfrog), target, s);
    const double a = r.divergent || r.nonfinite ? 0.0 : std::min(1.0, std::exp(r.log_alpha));
    h_bar += ((goal - a) - h_bar) / (t + kT0);
    log_eps = std::clamp(mu - std::sqrt(static_cast<double>(t)) / kGamma * h_bar, -30.0, 5.0);
    const double eta = std::pow(static_cast<double>(t), -kKappa);
    log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar;
    out.warmup_divergences += r.divergent;
  }
  const HmcKernel k(std::exp(cfg.n_warmup > 0 ? log_eps_bar : log_eps), cfg.n_leapfrog);
  out.draws.resize(cfg.n_samples, target.dim);
  double acc = 0;
  // eps jittered per step in [0.8, 1.2] eps so fixed-length trajectories do not resonate on near-Gaussian targets
  for (int t = 0; t < cfg.n_samples; ++t) {
    const double jitter = 0.8 + 0.4 * uniform01(s.rng);
    const StepRecord r = mh_step(HmcKernel(k.eps * jitter, k.n_leapfrog), target, s);
    acc += r.accepted;
    out.divergences += r.divergent;
    out.draws.row(t) = s.x.transpose();
  }
  out.eps = k.eps;
  out.n_samples = static_cast<std::size_t>(cfg.n_samples);
  out.accept_rate = cfg.n_samples ? acc / cfg.n_samples : 0.0;
  out.last = s.x;
  return out;
}

}  // namespace sbayes

#endif  // SBAYES_MCMC_HPP
