#include "sbir/distributions.hpp"

#include <Eigen/Cholesky>
#include <cmath>

#include "sbir/errors.hpp"

namespace sbir {

Support::Support(Vector lower, Vector upper)
    : lower_(std::move(lower)), upper_(std::move(upper)) {
  if (lower_.size() != upper_.size())
    throw Error("Support: lower/upper dimension mismatch");
  for (Index d = 0; d < lower_.size(); ++d)
    if (!(lower_[d] <= upper_[d])) throw Error("Support: lower > upper");
}

Support Support::unbounded(Index dim) {
  return Support(Vector::Constant(dim, kNegInf), Vector::Constant(dim, kInf));
}

Support Support::box(Vector lower, Vector upper) {
  return Support(std::move(lower), std::move(upper));
}

bool Support::bounded() const {
  for (Index d = 0; d < dim(); ++d)
    if (std::isinf(lower_[d]) || std::isinf(upper_[d])) return false;
  return true;
}

bool Support::contains(const Vector& theta) const {
  if (theta.size() != dim()) throw Error("Support::contains: dimension mismatch");
  for (Index d = 0; d < dim(); ++d)
    if (theta[d] < lower_[d] || theta[d] > upper_[d]) return false;
  return true;
}

std::vector<bool> Support::contains(const ParameterBatch& theta) const {
  if (theta.cols() != dim()) throw Error("Support::contains: dimension mismatch");
  std::vector<bool> mask(static_cast<std::size_t>(theta.rows()));
  for (Index i = 0; i < theta.rows(); ++i) {
    bool in = true;
    for (Index d = 0; d < dim(); ++d)
      if (theta(i, d) < lower_[d] || theta(i, d) > upper_[d]) {
        in = false;
        break;
      }
    mask[static_cast<std::size_t>(i)] = in;
  }
  return mask;
}

Prior Prior::uniform_box(Vector low, Vector high) {
  if (low.size() != high.size() || low.size() == 0)
    throw Error("uniform_box: bad bounds");
  for (Index d = 0; d < low.size(); ++d)
    if (!(low[d] < high[d])) throw Error("uniform_box: low must be < high per dimension");
  Prior p;
  p.kind_ = PriorKind::kUniformBox;
  p.dim_ = low.size();
  p.low_ = low;
  p.high_ = high;
  p.support_ = Support::box(low, high);
  p.log_norm_ = 0.0;
  for (Index d = 0; d < low.size(); ++d) p.log_norm_ -= std::log(high[d] - low[d]);
  return p;
}

Prior Prior::diagonal_gaussian(Vector mean, Vector variance) {
  if (mean.size() != variance.size() || mean.size() == 0)
    throw Error("diagonal_gaussian: bad parameters");
  for (Index d = 0; d < variance.size(); ++d)
    if (!(variance[d] > 0.0)) throw Error("diagonal_gaussian: variance must be positive");
  Prior p;
  p.kind_ = PriorKind::kDiagonalGaussian;
  p.dim_ = mean.size();
  p.mean_ = mean;
  p.var_ = variance;
  p.cov_ = variance.asDiagonal();
  p.support_ = Support::unbounded(mean.size());
  p.log_norm_ = -0.5 * static_cast<double>(mean.size()) * kLogTwoPi;
  for (Index d = 0; d < variance.size(); ++d) p.log_norm_ -= 0.5 * std::log(variance[d]);
  return p;
}

Prior Prior::full_gaussian(Vector mean, Matrix covariance) {
  const Index d = mean.size();
  if (covariance.rows() != d || covariance.cols() != d || d == 0)
    throw Error("full_gaussian: covariance shape mismatch");
  if (!covariance.isApprox(covariance.transpose(), 1e-12))
    throw Error("full_gaussian: covariance is not symmetric");
  Eigen::LLT<Matrix> llt(covariance);
  if (llt.info() != Eigen::Success)
    throw Error("full_gaussian: covariance is not positive definite");
  Prior p;
  p.kind_ = PriorKind::kFullGaussian;
  p.dim_ = d;
  p.mean_ = mean;
  p.cov_ = covariance;
  p.chol_ = llt.matrixL();
  p.support_ = Support::unbounded(d);
  double log_det = 0.0;
  for (Index i = 0; i < d; ++i) log_det += 2.0 * std::log(p.chol_(i, i));
  p.log_norm_ = -0.5 * (static_cast<double>(d) * kLogTwoPi + log_det);
  return p;
}

ParameterBatch Prior::sample(Index n, RngStream& rng) const {
  if (n < 0) throw Error("Prior::sample: n must be >= 0");
  ParameterBatch out(n, dim_);
  switch (kind_) {
    case PriorKind::kUniformBox:
      for (Index i = 0; i < n; ++i)
        for (Index d = 0; d < dim_; ++d)
          out(i, d) = rng.uniform_in(low_[d], high_[d]);
      break;
    case PriorKind::kDiagonalGaussian:
      for (Index i = 0; i < n; ++i)
        for (Index d = 0; d < dim_; ++d)
          out(i, d) = mean_[d] + std::sqrt(var_[d]) * rng.normal();
      break;
    case PriorKind::kFullGaussian:
      for (Index i = 0; i < n; ++i)
        out.row(i) = (mean_ + chol_ * rng.normal_vector(dim_)).transpose();
      break;
  }
  return out;
}

Vector Prior::log_prob(const ParameterBatch& theta) const {
  if (theta.cols() != dim_) throw Error("Prior::log_prob: dimension mismatch");
  Vector out(theta.rows());
  switch (kind_) {
    case PriorKind::kUniformBox:
      for (Index i = 0; i < theta.rows(); ++i)
        out[i] = support_.contains(Vector(theta.row(i).transpose())) ? log_norm_ : kNegInf;
      break;
    case PriorKind::kDiagonalGaussian:
      for (Index i = 0; i < theta.rows(); ++i) {
        double q = 0.0;
        for (Index d = 0; d < dim_; ++d) {
          const double z = theta(i, d) - mean_[d];
          q += z * z / var_[d];
        }
        out[i] = log_norm_ - 0.5 * q;
      }
      break;
    case PriorKind::kFullGaussian:
      for (Index i = 0; i < theta.rows(); ++i) {
        Vector diff = theta.row(i).transpose() - mean_;
        // Solve L y = diff; the quadratic form is |y|^2.
        Vector y = chol_.triangularView<Eigen::Lower>().solve(diff);
        out[i] = log_norm_ - 0.5 * y.squaredNorm();
      }
      break;
  }
  return out;
}

std::string Prior::kind_name() const {
  switch (kind_) {
    case PriorKind::kUniformBox: return "uniform-box";
    case PriorKind::kDiagonalGaussian: return "diagonal-gaussian";
    case PriorKind::kFullGaussian: return "full-gaussian";
  }
  return "?";
}

}  // namespace sbir
