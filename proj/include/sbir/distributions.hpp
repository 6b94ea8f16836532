#pragma once

#include <string>

#include "sbir/rng.hpp"
#include "sbir/types.hpp"

namespace sbir {

// Per-dimension closed bounds; +-inf marks an unbounded side.
class Support {
 public:
  Support() = default;
  Support(Vector lower, Vector upper);
  static Support unbounded(Index dim);
  static Support box(Vector lower, Vector upper);

  Index dim() const { return lower_.size(); }
  const Vector& lower() const { return lower_; }
  const Vector& upper() const { return upper_; }
  bool bounded() const;

  bool contains(const Vector& theta) const;
  // One entry per row of theta.
  std::vector<bool> contains(const ParameterBatch& theta) const;

 private:
  Vector lower_, upper_;
};

enum class PriorKind { kUniformBox, kDiagonalGaussian, kFullGaussian };

// Samplable, evaluable prior over theta with explicit support.
class Prior {
 public:
  static Prior uniform_box(Vector low, Vector high);
  static Prior diagonal_gaussian(Vector mean, Vector variance);
  // Covariance must be symmetric positive definite; the Cholesky factor is
  // computed here and construction fails if factorization does.
  static Prior full_gaussian(Vector mean, Matrix covariance);

  PriorKind kind() const { return kind_; }
  Index dim() const { return dim_; }
  const Support& support() const { return support_; }

  ParameterBatch sample(Index n, RngStream& rng) const;
  // Exact log density per row; -inf outside support.
  Vector log_prob(const ParameterBatch& theta) const;

  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  const Vector& low() const { return low_; }
  const Vector& high() const { return high_; }

  std::string kind_name() const;

 private:
  Prior() = default;

  PriorKind kind_ = PriorKind::kUniformBox;
  Index dim_ = 0;
  Support support_;

  Vector low_, high_;       // uniform box
  Vector mean_;             // gaussians
  Vector var_;              // diagonal gaussian
  Matrix cov_;              // full gaussian
  Matrix chol_;             // lower Cholesky factor of cov_
  double log_norm_ = 0.0;   // cached log normalization constant
};

}  // namespace sbir
