#pragma once

// Laplace-style posterior covariance of the trailing-layer parameters.
// The Fisher information is accumulated in Gauss-Newton outer-product form,
// either sample by sample through a Kalman-gain style rank-M downdate of the
// covariance, or directly in information form followed by one inversion.
// Both routes produce the same matrix and cross-check each other in tests.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "duq/nn.hpp"

namespace duq {

struct PosteriorCovariance {
  Matrix P;                      // covariance over the trailing-layer parameter prefix of theta
  int r = 0;                     // number of trailing weight matrices covered
  std::int64_t n_samples = 0;    // training samples folded in
  double prior_precision = 0.0;  // lambda * N under the training objective convention
  double tc = 1.0;               // accumulated covariance scaling
};

struct PerSampleScore {
  Matrix U;  // n_r x M; column m is sqrt(eta_m) * d g_m / d theta_r
};

inline Vector eta(const Vector& pmf) { return pmf.array() * (1.0 - pmf.array()); }

inline PerSampleScore sample_score(const ModelParams& model, const Vector& x, int r) {
  Matrix U = jacobian_g(model, x, r);
  const Vector p = softmax(forward(model, x).logits());
  U *= eta(p).cwiseSqrt().asDiagonal();
  return {std::move(U)};
}

inline PosteriorCovariance initial_posterior(const std::vector<LayerSpec>& layers, int r,
                                             double prior_precision) {
  if (!(prior_precision > 0.0))
    throw std::invalid_argument("prior precision must be positive to initialize the recursion");
  const Index n_r = trailing_param_count(layers, r);
  PosteriorCovariance post;
  post.P = Matrix::Identity(n_r, n_r) / prior_precision;
  post.r = r;
  post.prior_precision = prior_precision;
  return post;
}

// One covariance downdate: P <- P - P U (I + U^T P U)^{-1} U^T P, then
// symmetrized. U may stack the scores of several samples side by side; the
// result is algebraically identical to feeding them one at a time.
inline void recursive_update(PosteriorCovariance& post, const Eigen::Ref<const Matrix>& U,
                             std::int64_t samples_covered = 1) {
  if (U.rows() != post.P.rows())
    throw std::invalid_argument("score has " + std::to_string(U.rows()) + " rows, covariance is " +
                                std::to_string(post.P.rows()) + " x " + std::to_string(post.P.cols()));
  const Index q = U.cols();
  Matrix PU = post.P * U;
  Matrix S = Matrix::Identity(q, q);
  S.noalias() += U.transpose() * PU;
  S.diagonal().array() += 1e-12;  // jitter inside the small inversion
  Eigen::LLT<Matrix> llt(S);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("covariance update: innovation factorization failed");
  // W = PU * L^{-T}, so the downdate P - W W^T equals P - PU S^{-1} (PU)^T
  Matrix W = llt.matrixU().template solve<Eigen::OnTheRight>(PU);
  post.P.noalias() -= W * W.transpose();
  post.P = 0.5 * (post.P + post.P.transpose()).eval();
  if (!post.P.allFinite()) throw std::runtime_error("covariance update produced non-finite entries");
  post.n_samples += samples_covered;
}

inline void recursive_update(PosteriorCovariance& post, const PerSampleScore& score) {
  recursive_update(post, score.U, 1);
}

inline void scale_covariance(PosteriorCovariance& post, double tc) {
  if (!(tc > 0.0)) throw std::invalid_argument("covariance scaling tc must be positive");
  post.P *= tc;
  post.tc *= tc;
}

using ProgressFn = std::function<void(Index done, Index total)>;

// Direct information-form assembly: P = (sum_n U_n U_n^T + prior * I)^{-1}.
// Serves as the brute-force oracle for the recursion and as the fast path for
// large sample counts.
inline PosteriorCovariance direct_covariance(const ModelParams& model, const Matrix& X, int r,
                                             double prior_precision, const ProgressFn& progress = {}) {
  const Index n_r = trailing_param_count(model.layers, r);
  if (prior_precision < 0.0) throw std::invalid_argument("prior precision must be non-negative");
  Matrix info = Matrix::Zero(n_r, n_r);
  info.diagonal().array() += prior_precision;

  const Index block = 64;
  Matrix stack(n_r, block * model.num_classes());
  Index filled = 0;
  const auto flush = [&] {
    if (filled == 0) return;
    info.selfadjointView<Eigen::Lower>().rankUpdate(stack.leftCols(filled), 1.0);
    filled = 0;
  };
  for (Index n = 0; n < X.rows(); ++n) {
    const PerSampleScore score = sample_score(model, X.row(n).transpose(), r);
    stack.middleCols(filled, score.U.cols()) = score.U;
    filled += score.U.cols();
    if (filled == stack.cols()) flush();
    if (progress && (n + 1) % 2048 == 0) progress(n + 1, X.rows());
  }
  flush();
  info.triangularView<Eigen::Upper>() = info.transpose();

  Eigen::LLT<Matrix> llt(info);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("information matrix is singular; use a positive prior precision");
  PosteriorCovariance post;
  post.P = llt.solve(Matrix::Identity(n_r, n_r));
  post.P = 0.5 * (post.P + post.P.transpose()).eval();
  post.r = r;
  post.n_samples = X.rows();
  post.prior_precision = prior_precision;
  if (progress) progress(X.rows(), X.rows());
  return post;
}

enum class CovMethod { Recursive, Direct };

// Drives the chosen route over a data set. The recursion consumes samples in
// blocks of `block_size` (stacked scores), which is exact and much faster than
// one rank-M update per sample.
inline PosteriorCovariance compute_posterior(const ModelParams& model, const Matrix& X, int r,
                                             double prior_precision, CovMethod method,
                                             Index block_size = 64, const ProgressFn& progress = {}) {
  if (method == CovMethod::Direct) return direct_covariance(model, X, r, prior_precision, progress);
  if (block_size < 1) throw std::invalid_argument("block size must be >= 1");

  PosteriorCovariance post = initial_posterior(model.layers, r, prior_precision);
  const Index n_r = post.P.rows();
  const Index M = model.num_classes();
  Matrix stack(n_r, block_size * M);
  Index filled = 0;
  Index first_in_block = 0;
  for (Index n = 0; n < X.rows(); ++n) {
    const PerSampleScore score = sample_score(model, X.row(n).transpose(), r);
    stack.middleCols(filled, M) = score.U;
    filled += M;
    if (filled == stack.cols() || n + 1 == X.rows()) {
      try {
        recursive_update(post, stack.leftCols(filled), (n + 1) - first_in_block);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " (samples " + std::to_string(first_in_block) +
                                 ".." + std::to_string(n) + ")");
      }
      filled = 0;
      first_in_block = n + 1;
      if (progress) progress(n + 1, X.rows());
    }
  }
  return post;
}

}  // namespace duq
