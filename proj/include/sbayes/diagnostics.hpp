#ifndef SBAYES_DIAGNOSTICS_HPP
#define SBAYES_DIAGNOSTICS_HPP

#include "sbayes/common.hpp"

#include <unsupported/Eigen/FFT>

#include <complex>
#include <optional>
#include <string>
#include <vector>

namespace sbayes {

namespace detail {

/// Biased autocovariances c_0..c_{T-1} of one coordinate, via zero-padded FFT.
inline Vector autocovariance(const Vector& x) {
  const Eigen::Index t = x.size();
  Eigen::Index n = 1;
  while (n < 2 * t) n <<= 1;
  std::vector<double> padded(static_cast<std::size_t>(n), 0.0);
  const double mean = x.mean();
  for (Eigen::Index i = 0; i < t; ++i) padded[static_cast<std::size_t>(i)] = x[i] - mean;
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> power;
  fft.fwd(power, padded);
  for (auto& c : power) c = std::norm(c);
  std::vector<double> back;
  fft.inv(back, power);
  Vector out(t);
  for (Eigen::Index k = 0; k < t; ++k) out[k] = back[static_cast<std::size_t>(k)] / static_cast<double>(t);
  return out;
}

inline bool constant_column(const Matrix& chain, Eigen::Index c) {
  return (chain.col(c).array() == chain(0, c)).all();
}

}  // namespace detail

/// Lag-k autocorrelation averaged over coordinates; nullopt if any coordinate is constant.
inline std::optional<double> autocorrelation(const Matrix& chain, Eigen::Index k) {
  require(k >= 0 && chain.rows() > k, "autocorrelation needs chain length > k");
  double sum = 0;
  for (Eigen::Index c = 0; c < chain.cols(); ++c) {
    if (detail::constant_column(chain, c)) return std::nullopt;
    if (k == 0) {
      sum += 1.0;
      continue;
    }
    const Vector x = chain.col(c).array() - chain.col(c).mean();
    const double c0 = x.squaredNorm();
    sum += x.head(x.size() - k).dot(x.tail(x.size() - k)) / c0;
  }
  return sum / static_cast<double>(chain.cols());
}

/// ESS of each coordinate by Geyer's initial positive sequence.
inline std::optional<Vector> effective_sample_sizes(const Matrix& chain) {
  require(chain.rows() >= 100, "effective sample size needs at least 100 draws");
  const auto t = static_cast<double>(chain.rows());
  Vector ess(chain.cols());
  for (Eigen::Index c = 0; c < chain.cols(); ++c) {
    if (detail::constant_column(chain, c)) return std::nullopt;
    const Vector acov = detail::autocovariance(chain.col(c));
    const Vector rho = acov / acov[0];
    // tau = -1 + 2 sum_m (rho_{2m} + rho_{2m+1}), stopping at the first non-positive pair
    double tau = -1.0;
    for (Eigen::Index m = 0; 2 * m + 1 < rho.size(); ++m) {
      const double pair = rho[2 * m] + rho[2 * m + 1];
      if (pair <= 0) break;
      tau += 2 * pair;
    }
    ess[c] = t / tau;
  }
  return ess;
}

/// Smallest coordinate ESS.
inline std::optional<double> effective_sample_size(const Matrix& chain) {
  const auto e = effective_sample_sizes(chain);
  if (!e) return std::nullopt;
  return e->minCoeff();
}

struct GelmanRubin {
  double rhat = std::numeric_limits<double>::quiet_NaN();  ///< max over coordinates
  bool degenerate = false;
  std::string reason;
};

/// Potential scale reduction (between/within variances), max over coordinates.
/// Identical chain means or zero within-chain variance are flagged as degenerate.
inline GelmanRubin gelman_rubin(const std::vector<Matrix>& chains) {
  if (chains.size() < 2) throw InputError("Gelman-Rubin needs at least 2 chains");
  const Eigen::Index t = chains[0].rows(), d = chains[0].cols();
  require(t >= 2, "Gelman-Rubin needs at least 2 draws per chain");
  for (const auto& c : chains) require(c.rows() == t && c.cols() == d, "chains must have equal length and dimension");
  const auto m = static_cast<double>(chains.size());
  const auto tn = static_cast<double>(t);
  GelmanRubin out;
  out.rhat = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) {
    Vector means(static_cast<Eigen::Index>(chains.size())), vars(means.size());
    for (std::size_t j = 0; j < chains.size(); ++j) {
      const auto col = chains[j].col(k);
      means[static_cast<Eigen::Index>(j)] = col.mean();
      vars[static_cast<Eigen::Index>(j)] = (col.array() - col.mean()).square().sum() / (tn - 1);
    }
    const double b = tn * (means.array() - means.mean()).square().sum() / (m - 1);
    const double w = vars.mean();
    if (w == 0.0) {
      out.degenerate = true;
      out.reason = "zero within-chain variance in coordinate " + std::to_string(k);
      out.rhat = std::numeric_limits<double>::quiet_NaN();
      return out;
    }
    if (b == 0.0) {
      out.degenerate = true;
      out.reason = "chain means coincide exactly in coordinate " + std::to_string(k);
    }
    const double var_plus = (tn - 1) / tn * w + b / tn;
    out.rhat = std::max(out.rhat, std::sqrt(var_plus / w));
  }
  return out;
}

/// Realized mean squared jump mean_t |x_{t+1} - x_t|^2.
inline double esjd(const Matrix& chain) {
  require(chain.rows() >= 2, "ESJD needs at least 2 draws");
  const Eigen::Index n = chain.rows() - 1;
  return (chain.bottomRows(n) - chain.topRows(n)).rowwise().squaredNorm().mean();
}

}  // namespace sbayes

#endif  // SBAYES_DIAGNOSTICS_HPP
