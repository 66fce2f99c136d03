#pragma once

// Prediction with uncertainty: the point PMF, the delta-method Gaussian over
// the logits, and Monte-Carlo marginalization of that Gaussian into a PMF
// estimate with covariance. A full parameter-space sampler is kept as the
// reference implementation for validating the low-dimensional shortcut.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "duq/nn.hpp"
#include "duq/posterior.hpp"

namespace duq {

struct LogitGaussian {
  Vector mean;
  Matrix cov;
};

struct PmfEstimate {
  Vector pmf;
  Matrix cov;
  std::int64_t samples = 0;  // K
  std::uint64_t seed = 0;
};

inline Vector predict_point(const ModelParams& model, const Vector& x, double temperature = 1.0) {
  return softmax(forward(model, x).logits(), temperature);
}

// Lowest index wins ties.
inline int argmax_class(const Vector& pmf) {
  int best = 0;
  for (Index m = 1; m < pmf.size(); ++m)
    if (pmf[m] > pmf[best]) best = static_cast<int>(m);
  return best;
}

inline int classify(const ModelParams& model, const Vector& x) {
  return argmax_class(predict_point(model, x));
}

inline void check_posterior_matches(const ModelParams& model, const PosteriorCovariance& post) {
  if (post.r < 1 || post.r > static_cast<int>(model.layers.size()) ||
      trailing_param_count(model.layers, post.r) != post.P.rows())
    throw std::invalid_argument("posterior covariance (r = " + std::to_string(post.r) + ", dim " +
                                std::to_string(post.P.rows()) + ") does not match the model's trailing layers");
}

// Gaussian over the logits: mean g(x; theta_hat), covariance J^T P J.
inline LogitGaussian delta_propagate(const ModelParams& model, const PosteriorCovariance& post,
                                     const Vector& x) {
  check_posterior_matches(model, post);
  const Matrix J = jacobian_g(model, x, post.r);
  Matrix PJ = post.P * J;
  Matrix cov = J.transpose() * PJ;
  cov = 0.5 * (cov + cov.transpose()).eval();
  return {forward(model, x).logits(), std::move(cov)};
}

// Same result as calling delta_propagate row by row, but groups the Jacobian
// panels so the big P-product runs as a wide GEMM.
inline std::vector<LogitGaussian> delta_propagate_batch(const ModelParams& model,
                                                        const PosteriorCovariance& post, const Matrix& X,
                                                        Index block = 64) {
  check_posterior_matches(model, post);
  const Index M = model.num_classes();
  const Index n_r = post.P.rows();
  std::vector<LogitGaussian> out(static_cast<std::size_t>(X.rows()));
  Matrix panel(n_r, block * M);
  for (Index start = 0; start < X.rows(); start += block) {
    const Index rows = std::min(block, X.rows() - start);
    for (Index i = 0; i < rows; ++i)
      panel.middleCols(i * M, M) = jacobian_g(model, X.row(start + i).transpose(), post.r);
    const Matrix PJ = post.P * panel.leftCols(rows * M);
    for (Index i = 0; i < rows; ++i) {
      Matrix cov = panel.middleCols(i * M, M).transpose() * PJ.middleCols(i * M, M);
      cov = 0.5 * (cov + cov.transpose()).eval();
      out[static_cast<std::size_t>(start + i)] = {forward(model, X.row(start + i).transpose()).logits(),
                                                  std::move(cov)};
    }
  }
  return out;
}

namespace detail {

// Square-root factor via eigendecomposition with negative eigenvalues clamped
// to zero; robust to covariances that are indefinite by roundoff.
inline Matrix psd_sqrt_factor(const Matrix& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition of covariance failed");
  const Vector clamped = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * clamped.cwiseSqrt().asDiagonal();
}

}  // namespace detail

// K softmax(g) samples with g ~ N(mean, cov); one row per sample.
inline Matrix sample_pmfs(const LogitGaussian& lg, std::int64_t K, std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("sample count K must be >= 1");
  if (lg.cov.rows() != lg.mean.size() || lg.cov.cols() != lg.mean.size())
    throw std::invalid_argument("logit covariance shape does not match mean");
  const Index M = lg.mean.size();
  const Matrix A = detail::psd_sqrt_factor(lg.cov);
  if (A.isZero(0.0)) {  // degenerate Gaussian: every sample is the mean
    return Vector(softmax(lg.mean)).transpose().replicate(K, 1);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix samples(K, M);
  Vector z(M);
  for (std::int64_t k = 0; k < K; ++k) {
    for (Index i = 0; i < M; ++i) z[i] = normal(rng);
    samples.row(k) = softmax(lg.mean + A * z).transpose();
  }
  return samples;
}

inline PmfEstimate estimate_from_samples(const Matrix& samples, std::uint64_t seed) {
  const auto K = samples.rows();
  PmfEstimate est;
  est.pmf = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - est.pmf.transpose();
  est.cov = centered.transpose() * centered / static_cast<double>(K);
  est.cov = 0.5 * (est.cov + est.cov.transpose()).eval();
  est.samples = K;
  est.seed = seed;
  return est;
}

inline PmfEstimate mc_marginalize(const LogitGaussian& lg, std::int64_t K, std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("sample count K must be >= 1");
  if (lg.cov.isZero(0.0)) {
    // degenerate Gaussian: the estimate is the softmax of the mean, exactly
    PmfEstimate est;
    est.pmf = softmax(lg.mean);
    est.cov = Matrix::Zero(lg.mean.size(), lg.mean.size());
    est.samples = K;
    est.seed = seed;
    return est;
  }
  return estimate_from_samples(sample_pmfs(lg, K, seed), seed);
}

// Reference sampler in the trailing-layer parameter space: draws theta_r,
// reruns the trailing forward pass per draw. Exact for checking the delta
// shortcut; expensive for anything else.
inline PmfEstimate mc_full_space(const ModelParams& model, const PosteriorCovariance& post, const Vector& x,
                                 std::int64_t K, std::uint64_t seed) {
  check_posterior_matches(model, post);
  if (K < 1) throw std::invalid_argument("sample count K must be >= 1");
  const int L = static_cast<int>(model.layers.size());
  const int first = L - post.r;
  const ForwardCache cache = forward(model, x);
  const Vector& feature = cache.inputs[static_cast<std::size_t>(first)];
  const Index n_r = post.P.rows();
  const Index M = model.num_classes();

  const Matrix A = detail::psd_sqrt_factor(post.P);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix samples(K, M);
  Vector z(n_r);
  Vector theta_r(n_r);
  for (std::int64_t k = 0; k < K; ++k) {
    for (Index i = 0; i < n_r; ++i) z[i] = normal(rng);
    theta_r = model.theta.head(n_r) + A * z;
    Vector h = feature;
    for (int l = first; l < L; ++l) {
      const auto& s = model.layers[static_cast<std::size_t>(l)];
      Eigen::Map<const Matrix> W(theta_r.data() + layer_offset(model.layers, static_cast<std::size_t>(l)),
                                 s.input_dim + 1, s.output_dim);
      Vector a = W.topRows(s.input_dim).transpose() * h + W.row(s.input_dim).transpose();
      h = (l + 1 < L) ? apply_activation(s.activation, a) : a;
    }
    samples.row(k) = softmax(h).transpose();
  }
  return estimate_from_samples(samples, seed);
}

}  // namespace duq
