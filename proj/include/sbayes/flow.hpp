#ifndef SBAYES_FLOW_HPP
#define SBAYES_FLOW_HPP

// Planar normalizing flows  f_k(z) = z + a_k tanh(w_k'z + b_k)  over a
// standard-normal base, with exact log-determinants and hand-written
// parameter gradients of the negative log density.
//
// Parameters are stored raw. A layer whose raw parameters violate the
// invertibility margin (w'a < -1 + 1e-6) is evaluated with the projected
// scale vector from `project_invertible`, so optimizers can work on
// unconstrained parameters.
//
// Continuous flows are not provided: an Euler discretization of the flow ODE
// with step 1/K is itself a K-layer discrete flow of this form.

#include "sbayes/common.hpp"

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace sbayes {

inline constexpr double kInvertibilityMargin = 1e-6;

struct PlanarLayer {
  Vector a;  ///< scale direction
  Vector w;  ///< projection direction
  double b = 0.0;

  Eigen::Index dim() const { return a.size(); }
};

/// Rescale `a` along `w` so that w'a_hat = max(m(w'a), -1 + 1e-6), m(x) = -1 + log(1 + e^x).
/// A zero `w` leaves the layer unchanged.
inline PlanarLayer project_invertible(const PlanarLayer& layer) {
  const double q = layer.w.squaredNorm();
  if (q == 0.0) return layer;
  const double u = layer.w.dot(layer.a);
  const double target = std::max(-1.0 + softplus(u), -1.0 + kInvertibilityMargin);
  PlanarLayer out = layer;
  out.a += ((target - u) / q) * layer.w;
  return out;
}

inline bool satisfies_invertibility(const PlanarLayer& layer) {
  return layer.w.dot(layer.a) >= -1.0 + kInvertibilityMargin;
}

/// Layer actually used for evaluation.
inline PlanarLayer effective_layer(const PlanarLayer& raw) {
  return satisfies_invertibility(raw) ? raw : project_invertible(raw);
}

struct FlowOutput {
  Vector y;
  double logdet = 0.0;
};

struct FlowSample {
  Matrix draws;         ///< n x D
  Vector logdensities;  ///< log q(draw_i)
};

class ComposedFlow {
 public:
  ComposedFlow() = default;

  ComposedFlow(Eigen::Index dim, std::vector<PlanarLayer> layers) : dim_(dim), layers_(std::move(layers)) {
    require(dim >= 1, "flow dimension must be positive");
    for (const auto& l : layers_)
      require(l.a.size() == dim && l.w.size() == dim && std::isfinite(l.b) && l.a.allFinite() && l.w.allFinite(),
              "planar layer parameters must be finite with dimension D");
    refresh();
  }

  /// K layers with a = w = 0, b = 0: the identity map.
  static ComposedFlow identity(Eigen::Index dim, std::size_t n_layers) {
    return ComposedFlow(dim, std::vector<PlanarLayer>(n_layers, {Vector::Zero(dim), Vector::Zero(dim), 0.0}));
  }

  /// Identity map (a = 0) with random projection directions, a usual starting point for fitting.
  static ComposedFlow identity_random_directions(Eigen::Index dim, std::size_t n_layers, double scale, Rng& rng) {
    std::vector<PlanarLayer> ls;
    for (std::size_t k = 0; k < n_layers; ++k)
      ls.push_back({Vector::Zero(dim), scale * standard_normal_vector(dim, rng), scale * standard_normal_vector(1, rng)[0]});
    return ComposedFlow(dim, std::move(ls));
  }

  static Eigen::Index param_count(Eigen::Index dim, std::size_t n_layers) {
    return static_cast<Eigen::Index>(n_layers) * (2 * dim + 1);
  }

  /// Flat parameters ordered (a_1, w_1, b_1, a_2, ...).
  static ComposedFlow from_params(Eigen::Index dim, std::size_t n_layers, const Vector& params) {
    require(params.size() == param_count(dim, n_layers), "flow parameter vector has wrong length");
    std::vector<PlanarLayer> ls(n_layers);
    Eigen::Index o = 0;
    for (auto& l : ls) {
      l.a = params.segment(o, dim);
      l.w = params.segment(o + dim, dim);
      l.b = params[o + 2 * dim];
      o += 2 * dim + 1;
    }
    return ComposedFlow(dim, std::move(ls));
  }

  Vector params() const {
    Vector p(param_count(dim_, layers_.size()));
    Eigen::Index o = 0;
    for (const auto& l : layers_) {
      p.segment(o, dim_) = l.a;
      p.segment(o + dim_, dim_) = l.w;
      p[o + 2 * dim_] = l.b;
      o += 2 * dim_ + 1;
    }
    return p;
  }

  Eigen::Index dim() const { return dim_; }
  std::size_t n_layers() const { return layers_.size(); }
  const std::vector<PlanarLayer>& layers() const { return layers_; }

  FlowOutput forward(const Vector& z) const {
    require(z.size() == dim_, "flow input has wrong dimension");
    FlowOutput out{z, 0.0};
    for (std::size_t k = 0; k < eff_.size(); ++k) {
      const auto& l = eff_[k];
      const double th = std::tanh(l.w.dot(out.y) + l.b);
      const double jac = 1.0 + (1.0 - th * th) * l.w.dot(l.a);
      out.y += th * l.a;
      out.logdet += std::log(std::abs(jac));
      if (!out.y.allFinite() || !std::isfinite(out.logdet))
        throw NumericError("non-finite value in flow layer " + std::to_string(k));
    }
    return out;
  }

  Vector inverse(const Vector& y) const {
    require(y.size() == dim_, "flow input has wrong dimension");
    Vector z = y;
    for (std::size_t k = eff_.size(); k-- > 0;) z = invert_layer(eff_[k], z, k);
    return z;
  }

  double log_density(const Vector& y) const {
    const Vector z0 = inverse(y);
    return log_std_normal(z0) - forward(z0).logdet;
  }

  FlowSample sample(Eigen::Index n, std::uint64_t seed) const {
    require(n >= 1, "sample count must be positive");
    Rng rng(seed);
    FlowSample s{Matrix(n, dim_), Vector(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vector z = standard_normal_vector(dim_, rng);
      const FlowOutput f = forward(z);
      s.draws.row(i) = f.y.transpose();
      s.logdensities[i] = log_std_normal(z) - f.logdet;
    }
    return s;
  }

  /// grad += scale * d/dparams [ -log q(y) ].
  void accumulate_neg_logdensity_grad(const Vector& y, double scale, Vector& grad) const {
    const std::size_t K = eff_.size();
    std::vector<Vector> zs(K + 1);
    zs[K] = y;
    for (std::size_t k = K; k-- > 0;) zs[k] = invert_layer(eff_[k], zs[k + 1], k);

    Vector gz = zs[0];  // d/dz0 of 0.5 |z0|^2
    Eigen::Index o = 0;
    for (std::size_t k = 0; k < K; ++k, o += 2 * dim_ + 1) {
      const PlanarLayer& l = eff_[k];
      const Vector& z = zs[k];
      const double th = std::tanh(l.w.dot(z) + l.b);
      const double hp = 1.0 - th * th;
      const double hpp = -2.0 * th * hp;
      const double c = l.w.dot(l.a);
      const double den = 1.0 + hp * c;
      const double dld_dalpha = hpp * c / den;
      const double dld_dc = hp / den;

      // log-det term of this layer
      Vector g_ahat = dld_dc * l.w;
      Vector g_w = dld_dalpha * z + dld_dc * l.a;
      double g_b = dld_dalpha;
      gz += dld_dalpha * l.w;

      // z_k = f_k^{-1}(z_{k+1}): adjoint through the implicit inverse, J^{-T} via Sherman-Morrison
      const Vector lambda = gz - (hp * l.a.dot(gz) / den) * l.w;
      const double s = l.a.dot(lambda);
      g_ahat -= th * lambda;
      g_w -= (hp * s) * z;
      g_b -= hp * s;
      gz = lambda;

      // a_hat depends on raw (a, w) when the projection is active
      const PlanarLayer& raw = layers_[k];
      Vector g_a = g_ahat;
      if (!satisfies_invertibility(raw) && raw.w.squaredNorm() > 0) {
        const double q = raw.w.squaredNorm();
        const double u = raw.w.dot(raw.a);
        const double m = -1.0 + softplus(u);
        const bool floored = m < -1.0 + kInvertibilityMargin;
        const double cu = (floored ? -1.0 + kInvertibilityMargin : m) - u;
        const double dcu = (floored ? 0.0 : sigmoid(u)) - 1.0;
        const double wg = raw.w.dot(g_ahat);
        g_a += (dcu * wg / q) * raw.w;
        g_w += (dcu * wg / q) * raw.a + (cu / q) * g_ahat - (2.0 * cu * wg / (q * q)) * raw.w;
      }
      grad.segment(o, dim_) += scale * g_a;
      grad.segment(o + dim_, dim_) += scale * g_w;
      grad[o + 2 * dim_] += scale * g_b;
    }
  }

  /// Mean over rows of y_batch of grad_params[-log q(y)].
  Vector param_grad_neg_logdensity(const Matrix& y_batch) const {
    require(y_batch.rows() >= 1 && y_batch.cols() == dim_, "gradient batch must be nonempty n x D");
    Vector g = Vector::Zero(param_count(dim_, layers_.size()));
    const double scale = 1.0 / static_cast<double>(y_batch.rows());
    for (Eigen::Index i = 0; i < y_batch.rows(); ++i)
      accumulate_neg_logdensity_grad(y_batch.row(i).transpose(), scale, g);
    if (!g.allFinite()) throw NumericError("non-finite flow parameter gradient");
    return g;
  }

 private:
  void refresh() {
    eff_.clear();
    for (const auto& l : layers_) eff_.push_back(effective_layer(l));
  }

  // Solve alpha + c tanh(alpha + b) = w'y for alpha = w'z (monotone since c > -1),
  // safeguarded Newton with bisection fallback on the bracket [t - |c|, t + |c|].
  static Vector invert_layer(const PlanarLayer& l, const Vector& y, std::size_t k) {
    const double c = l.w.dot(l.a);
    const double t = l.w.dot(y);
    double lo = t - std::abs(c), hi = t + std::abs(c);
    double alpha = t;
    double prev_abs_g = std::numeric_limits<double>::infinity();
    bool converged = c == 0.0;
    for (int it = 0; it < 200 && !converged; ++it) {
      const double th = std::tanh(alpha + l.b);
      const double g = alpha + c * th - t;
      if (std::abs(g) <= 1e-12 * (1.0 + std::abs(t))) {
        converged = true;
        break;
      }
      if (g > 0) hi = alpha; else lo = alpha;
      if (hi - lo <= 1e-15 * (1.0 + std::abs(alpha))) {
        converged = true;
        break;
      }
      // Newton unless it leaves the bracket or failed to halve the residual last time
      const double dg = 1.0 + c * (1.0 - th * th);
      double next = alpha - g / dg;
      if (!(next > lo && next < hi) || std::abs(g) > 0.5 * prev_abs_g) next = 0.5 * (lo + hi);
      prev_abs_g = std::abs(g);
      alpha = next;
    }
    if (!converged) throw NumericError("planar layer " + std::to_string(k) + " inversion did not converge");
    Vector z = y - std::tanh(alpha + l.b) * l.a;
    if (!z.allFinite()) throw NumericError("non-finite value inverting flow layer " + std::to_string(k));
    return z;
  }

  Eigen::Index dim_ = 0;
  std::vector<PlanarLayer> layers_;
  std::vector<PlanarLayer> eff_;
};

// Checkpoint: uint64 D, uint64 K, then K(2D+1) float64 parameters, all little-endian.

namespace detail {
inline void put_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_le(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw InputError("truncated flow checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void write_flow_checkpoint(std::ostream& out, const ComposedFlow& flow) {
  detail::put_le(out, static_cast<std::uint64_t>(flow.dim()));
  detail::put_le(out, static_cast<std::uint64_t>(flow.n_layers()));
  const Vector p = flow.params();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &p[i], 8);
    detail::put_le(out, bits);
  }
}

inline ComposedFlow read_flow_checkpoint(std::istream& in) {
  const auto d = detail::get_le(in);
  const auto k = detail::get_le(in);
  require(d >= 1 && d < (1u << 20) && k < (1u << 20), "implausible flow checkpoint header");
  Vector p(ComposedFlow::param_count(static_cast<Eigen::Index>(d), k));
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const std::uint64_t bits = detail::get_le(in);
    std::memcpy(&p[i], &bits, 8);
  }
  return ComposedFlow::from_params(static_cast<Eigen::Index>(d), k, p);
}

inline void save_flow(const std::string& path, const ComposedFlow& flow) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  write_flow_checkpoint(out, flow);
}

inline ComposedFlow load_flow(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return read_flow_checkpoint(in);
}

}  // namespace sbayes

#endif  // SBAYES_FLOW_HPP
