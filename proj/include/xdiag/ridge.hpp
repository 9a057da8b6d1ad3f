#pragma once

// Closed-form minimizer of (1/n) sum ||W x_i - t_i||^2 + lambda ||W||_F^2.

#include "xdiag/probe.hpp"

namespace xdiag {

/// Solves W (X^T X / n + lambda I) = T^T X / n. The system matrix is symmetric
/// positive definite for lambda > 0.
inline ProbeModel ridge_fit(const Matrix& x, const Matrix& targets, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("ridge lambda must be > 0");
  require(x.rows() == targets.rows(), "ridge_fit: X and T row counts differ");
  require(x.rows() >= 1 && x.cols() >= 1 && targets.cols() >= 1, "ridge_fit: empty input");
  require(x.allFinite() && targets.allFinite(), "ridge_fit: non-finite input");
  const auto n = static_cast<double>(x.rows());
  Eigen::MatrixXd gram = (x.transpose() * x) / n;
  gram.diagonal().array() += lambda;
  const Eigen::MatrixXd rhs = (x.transpose() * targets) / n;  // d x C
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success) throw DataError("ridge_fit: factorization failed");
  const Eigen::MatrixXd wt = ldlt.solve(rhs);

  ProbeModel m;
  m.kind = ProbeKind::linear;
  m.task = Task::quadratic;
  m.activation = Activation::none;
  Layer l;
  l.weight = wt.transpose();
  m.layers.push_back(std::move(l));
  m.config.ridge_lambda = lambda;
  return m;
}

/// (1/n) sum ||W x_i - t_i||^2 + lambda ||W||_F^2 for a linear weight matrix.
inline double ridge_objective(const Matrix& w, const Matrix& x, const Matrix& targets, double lambda) {
  return (x * w.transpose() - targets).squaredNorm() / static_cast<double>(x.rows()) + lambda * w.squaredNorm();
}

}  // namespace xdiag
