#ifndef SBAYES_GAUSSIAN_HPP
#define SBAYES_GAUSSIAN_HPP

#include "sbayes/common.hpp"

namespace sbayes {

/// Multivariate normal with SPD covariance; used as the closed-form oracle everywhere.
class GaussianPosterior {
 public:
  GaussianPosterior(Vector mean, Matrix covariance) : mean_(std::move(mean)), cov_(std::move(covariance)) {
    require(cov_.rows() == mean_.size() && cov_.cols() == mean_.size(), "covariance shape must match mean");
    require((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, cov_.cwiseAbs().maxCoeff()),
            "covariance must be symmetric");
    llt_.compute(cov_);
    if (llt_.info() != Eigen::Success) throw NumericError("covariance is not positive definite");
  }

  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  Eigen::Index dim() const { return mean_.size(); }

  double log_det_cov() const { return 2.0 * llt_.matrixL().toDenseMatrix().diagonal().array().log().sum(); }

  double log_pdf(const Vector& x) const {
    const Vector r = llt_.matrixL().solve(x - mean_);
    return -0.5 * (static_cast<double>(dim()) * kLog2Pi + log_det_cov() + r.squaredNorm());
  }

  Vector sample(Rng& rng) const { return mean_ + llt_.matrixL() * standard_normal_vector(dim(), rng); }

  Matrix precision() const { return llt_.solve(Matrix::Identity(dim(), dim())); }

 private:
  Vector mean_;
  Matrix cov_;
  Eigen::LLT<Matrix> llt_;
};

/// KL(p || q) between Gaussians.
inline double gaussian_kl(const GaussianPosterior& p, const GaussianPosterior& q) {
  require(p.dim() == q.dim(), "dimension mismatch in gaussian_kl");
  const Eigen::LLT<Matrix> lq(q.covariance());
  const double k = static_cast<double>(p.dim());
  const double trace = lq.solve(p.covariance()).trace();
  const Vector dm = q.mean() - p.mean();
  const double maha = dm.dot(lq.solve(dm));
  return 0.5 * (trace + maha - k + q.log_det_cov() - p.log_det_cov());
}

/// Log of a Gaussian-shaped factor  exp(-0.5 t'At + h't + c)  in natural form.
///
/// Conjugate models are sums of these: the prior, each datum, tempered and
/// powered variants are all scalings, so combining shards is plain addition.
struct GaussianFactor {
  Matrix precision;
  Vector shift;
  double constant = 0.0;

  static GaussianFactor zero(Eigen::Index p) { return {Matrix::Zero(p, p), Vector::Zero(p), 0.0}; }

  GaussianFactor& operator+=(const GaussianFactor& o) {
    precision += o.precision;
    shift += o.shift;
    constant += o.constant;
    return *this;
  }
  friend GaussianFactor operator+(GaussianFactor a, const GaussianFactor& b) { return a += b; }
  friend GaussianFactor operator*(double s, GaussianFactor a) {
    a.precision *= s;
    a.shift *= s;
    a.constant *= s;
    return a;
  }

  double log_value(const Vector& t) const { return -0.5 * t.dot(precision * t) + shift.dot(t) + constant; }

  /// Normalized distribution; requires a positive-definite precision.
  GaussianPosterior normalized() const {
    const Eigen::LLT<Matrix> llt(precision);
    if (llt.info() != Eigen::Success) throw NumericError("posterior precision is not positive definite");
    Matrix cov = llt.solve(Matrix::Identity(precision.rows(), precision.cols()));
    cov = 0.5 * (cov + cov.transpose()).eval();
    return {llt.solve(shift), cov};
  }

  /// log of the integral of exp(log_value) over R^p.
  double log_integral() const {
    const Eigen::LLT<Matrix> llt(precision);
    if (llt.info() != Eigen::Success) throw NumericError("factor is not integrable");
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const auto p = static_cast<double>(precision.rows());
    return constant + 0.5 * p * kLog2Pi - 0.5 * logdet + 0.5 * shift.dot(llt.solve(shift));
  }
};

}  // namespace sbayes

#endif  // SBAYES_GAUSSIAN_HPP
