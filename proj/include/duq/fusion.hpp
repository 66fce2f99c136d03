#pragma once

// Fusion of logit-space Gaussians: precision-weighted combination across
// independent classifiers, and generalized least squares across several
// inputs of one classifier known to share a class. Fusion stays in logit
// space; the PMF is only formed afterwards by MC marginalization.
// Also the threshold-exceedance risk estimate over MC PMF samples.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "duq/predict.hpp"

namespace duq {

struct FusedLogit {
  LogitGaussian lg;
  std::vector<std::string> provenance;
};

namespace detail {

// Cholesky with a fallback jitter of 1e-10 * (trace/dim) on the diagonal.
// Near-singular covariances are the normal operating regime here (strongly
// elongated logit ellipses), and exactly duplicated inputs make the
// same-class system rank deficient.
inline Eigen::LLT<Matrix> spd_factor(Matrix A, const std::string& what) {
  Eigen::LLT<Matrix> llt(A);
  const double scale = A.trace() / static_cast<double>(A.rows());
  bool healthy = llt.info() == Eigen::Success;
  if (healthy && scale > 0.0) {
    const double min_pivot = Matrix(llt.matrixL()).diagonal().minCoeff();
    healthy = min_pivot * min_pivot > 1e-12 * scale;
  }
  if (!healthy) {
    A.diagonal().array() += 1e-10 * scale;
    llt.compute(A);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error(what + ": covariance not invertible, even after jitter");
  }
  return llt;
}

}  // namespace detail

// Precision-weighted combination of independent classifier outputs:
// P = (sum_c P_c^{-1})^{-1},  mean = P * sum_c P_c^{-1} mean_c.
inline FusedLogit fuse_classifiers(const std::vector<LogitGaussian>& inputs,
                                   std::vector<std::string> provenance = {}) {
  if (inputs.empty()) throw std::invalid_argument("fuse_classifiers: need at least one input");
  if (inputs.size() == 1) return {inputs.front(), std::move(provenance)};
  const Index M = inputs.front().mean.size();
  Matrix precision = Matrix::Zero(M, M);
  Vector weighted = Vector::Zero(M);
  for (std::size_t c = 0; c < inputs.size(); ++c) {
    const auto& in = inputs[c];
    if (in.mean.size() != M || in.cov.rows() != M || in.cov.cols() != M)
      throw std::invalid_argument("fuse_classifiers: input " + std::to_string(c) + " has mismatched dims");
    const auto llt = detail::spd_factor(in.cov, "classifier " + std::to_string(c));
    precision.noalias() += llt.solve(Matrix::Identity(M, M));
    weighted.noalias() += llt.solve(in.mean);
  }
  const auto llt = detail::spd_factor(precision, "fused precision");
  FusedLogit fused;
  fused.lg.cov = llt.solve(Matrix::Identity(M, M));
  fused.lg.cov = 0.5 * (fused.lg.cov + fused.lg.cov.transpose()).eval();
  fused.lg.mean = llt.solve(weighted);
  fused.provenance = std::move(provenance);
  return fused;
}

struct CrossCovariance {
  Matrix R;         // (C*M) x (C*M)
  Index block_dim;  // M

  Index blocks() const { return R.rows() / block_dim; }
  Eigen::Block<const Matrix> block(Index i, Index j) const {
    return R.block(i * block_dim, j * block_dim, block_dim, block_dim);
  }
};

// All pairwise logit covariances J_i^T P J_j of a set of inputs under one
// shared posterior. Diagonal blocks coincide with delta_propagate.
inline CrossCovariance cross_covariance(const ModelParams& model, const PosteriorCovariance& post,
                                        const std::vector<Vector>& inputs) {
  check_posterior_matches(model, post);
  if (inputs.empty()) throw std::invalid_argument("cross_covariance: need at least one input");
  const Index M = model.num_classes();
  const Index C = static_cast<Index>(inputs.size());
  std::vector<Matrix> J(inputs.size()), PJ(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    J[i] = jacobian_g(model, inputs[i], post.r);
    PJ[i] = post.P * J[i];
  }
  CrossCovariance cross{Matrix(C * M, C * M), M};
  for (Index i = 0; i < C; ++i)
    for (Index j = 0; j < C; ++j)
      cross.R.block(i * M, j * M, M, M).noalias() =
          J[static_cast<std::size_t>(i)].transpose() * PJ[static_cast<std::size_t>(j)];
  cross.R = 0.5 * (cross.R + cross.R.transpose()).eval();
  return cross;
}

// GLS fusion of several inputs of the same (unknown) class:
// P = (H^T R^{-1} H)^{-1},  mean = P H^T R^{-1} z  with H stacked identities.
inline FusedLogit fuse_same_class(const ModelParams& model, const PosteriorCovariance& post,
                                  const std::vector<Vector>& inputs,
                                  std::vector<std::string> provenance = {}) {
  if (inputs.empty()) throw std::invalid_argument("fuse_same_class: need at least one input");
  if (inputs.size() == 1)
    return {delta_propagate(model, post, inputs.front()), std::move(provenance)};
  const Index M = model.num_classes();
  const Index C = static_cast<Index>(inputs.size());

  const CrossCovariance cross = cross_covariance(model, post, inputs);
  Vector z(C * M);
  for (Index c = 0; c < C; ++c)
    z.segment(c * M, M) = forward(model, inputs[static_cast<std::size_t>(c)]).logits();

  const auto llt = detail::spd_factor(cross.R, "same-class system");
  Matrix Rinv_H(C * M, M);
  {
    Matrix H = Matrix::Zero(C * M, M);
    for (Index c = 0; c < C; ++c) H.block(c * M, 0, M, M).setIdentity();
    Rinv_H = llt.solve(H);
  }
  const Vector Rinv_z = llt.solve(z);

  Matrix normal_matrix = Matrix::Zero(M, M);  // H^T R^{-1} H
  Vector rhs = Vector::Zero(M);               // H^T R^{-1} z
  for (Index c = 0; c < C; ++c) {
    normal_matrix += Rinv_H.middleRows(c * M, M);
    rhs += Rinv_z.segment(c * M, M);
  }
  const auto llt_n = detail::spd_factor(normal_matrix, "same-class normal matrix");
  FusedLogit fused;
  fused.lg.cov = llt_n.solve(Matrix::Identity(M, M));
  fused.lg.cov = 0.5 * (fused.lg.cov + fused.lg.cov.transpose()).eval();
  fused.lg.mean = llt_n.solve(rhs);
  fused.provenance = std::move(provenance);
  return fused;
}

// Fraction of MC PMF samples whose component m exceeds gamma.
inline double risk_assess(const Matrix& pmf_samples, int class_index, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("risk threshold must lie in [0, 1]");
  if (class_index < 0 || class_index >= pmf_samples.cols())
    throw std::invalid_argument("risk class index out of range");
  if (pmf_samples.rows() < 1) throw std::invalid_argument("risk needs at least one sample");
  const auto exceed = (pmf_samples.col(class_index).array() > gamma).count();
  return static_cast<double>(exceed) / static_cast<double>(pmf_samples.rows());
}

// Regenerates the same sample set a PmfEstimate was built from (same seed/K),
// so the reported risk is consistent with the reported PMF.
inline double risk_assess(const LogitGaussian& lg, std::int64_t K, std::uint64_t seed, int class_index,
                          double gamma) {
  return risk_assess(sample_pmfs(lg, K, seed), class_index, gamma);
}

}  // namespace duq
