#pragma once

// Fully connected ReLU classifier: forward pass, cross-entropy log-likelihood
// and the gradients/Jacobians needed for MAP training and for propagating
// parameter uncertainty to the logits.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace duq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Activation { Relu, Identity };

struct LayerSpec {
  Index input_dim = 0;
  Index output_dim = 0;
  Activation activation = Activation::Relu;
};

inline void validate_layers(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw std::invalid_argument("model has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].input_dim <= 0 || layers[l].output_dim <= 0)
      throw std::invalid_argument("layer " + std::to_string(l) + " has non-positive dimensions");
    if (l + 1 < layers.size() && layers[l].output_dim != layers[l + 1].input_dim)
      throw std::invalid_argument("layer " + std::to_string(l) + " output dim " +
                                  std::to_string(layers[l].output_dim) + " does not match layer " +
                                  std::to_string(l + 1) + " input dim");
  }
  if (layers.back().activation != Activation::Identity)
    throw std::invalid_argument("final layer must have identity activation (logits)");
}

// Each layer owns an (input_dim + 1) x output_dim weight matrix, bias as the
// final row. The flat parameter vector stores the matrices column-major,
// LAST layer first:
//   theta = [vec(W[L-1]), vec(W[L-2]), ..., vec(W[0])]
// so the trailing-r-layers subset used by the posterior is a prefix of theta.
// This order is frozen; artifact files depend on it.
inline Index layer_param_count(const LayerSpec& s) { return (s.input_dim + 1) * s.output_dim; }

inline Index param_count(const std::vector<LayerSpec>& layers) {
  Index n = 0;
  for (const auto& s : layers) n += layer_param_count(s);
  return n;
}

inline Index trailing_param_count(const std::vector<LayerSpec>& layers, int r) {
  if (r < 1 || r > static_cast<int>(layers.size()))
    throw std::invalid_argument("trailing layer count r = " + std::to_string(r) +
                                " outside [1, " + std::to_string(layers.size()) + "]");
  Index n = 0;
  for (std::size_t l = layers.size() - static_cast<std::size_t>(r); l < layers.size(); ++l)
    n += layer_param_count(layers[l]);
  return n;
}

inline Index layer_offset(const std::vector<LayerSpec>& layers, std::size_t layer) {
  Index off = 0;
  for (std::size_t l = layers.size(); l-- > layer + 1;) off += layer_param_count(layers[l]);
  return off;
}

struct ModelParams {
  std::vector<LayerSpec> layers;
  Vector theta;

  Index num_classes() const { return layers.back().output_dim; }
  Index input_dim() const { return layers.front().input_dim; }

  Eigen::Map<const Matrix> weight(std::size_t l) const {
    const auto& s = layers.at(l);
    return {theta.data() + layer_offset(layers, l), s.input_dim + 1, s.output_dim};
  }
  Eigen::Map<Matrix> weight(std::size_t l) {
    const auto& s = layers.at(l);
    return {theta.data() + layer_offset(layers, l), s.input_dim + 1, s.output_dim};
  }
};

inline ModelParams make_model(std::vector<LayerSpec> layers, Vector theta) {
  validate_layers(layers);
  if (theta.size() != param_count(layers))
    throw std::invalid_argument("theta has " + std::to_string(theta.size()) +
                                " entries, layer chain needs " + std::to_string(param_count(layers)));
  return ModelParams{std::move(layers), std::move(theta)};
}

inline Vector vectorize(const std::vector<LayerSpec>& layers, const std::vector<Matrix>& weights) {
  if (weights.size() != layers.size()) throw std::invalid_argument("weight count != layer count");
  Vector theta(param_count(layers));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    if (weights[l].rows() != s.input_dim + 1 || weights[l].cols() != s.output_dim)
      throw std::invalid_argument("weight matrix " + std::to_string(l) + " has wrong shape");
    Eigen::Map<Matrix>(theta.data() + layer_offset(layers, l), s.input_dim + 1, s.output_dim) = weights[l];
  }
  return theta;
}

inline std::vector<Matrix> unvectorize(const ModelParams& model) {
  std::vector<Matrix> weights;
  weights.reserve(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) weights.emplace_back(model.weight(l));
  return weights;
}

// --- forward pass ---

struct ForwardCache {
  std::vector<Vector> inputs;  // inputs[l]: activation fed into layer l
  std::vector<Vector> pre;     // pre[l]: affine output of layer l
  const Vector& logits() const { return pre.back(); }
};

inline Vector apply_activation(Activation a, const Vector& z) {
  if (a == Activation::Identity) return z;
  return z.cwiseMax(0.0);
}

inline ForwardCache forward(const ModelParams& model, const Vector& x) {
  if (x.size() != model.input_dim())
    throw std::invalid_argument("input has " + std::to_string(x.size()) + " entries, model expects " +
                                std::to_string(model.input_dim()));
  const std::size_t L = model.layers.size();
  ForwardCache cache;
  cache.inputs.reserve(L);
  cache.pre.reserve(L);
  Vector h = x;
  for (std::size_t l = 0; l < L; ++l) {
    const auto W = model.weight(l);
    const Index in = model.layers[l].input_dim;
    Vector a = W.topRows(in).transpose() * h + W.row(in).transpose();
    cache.inputs.push_back(std::move(h));
    cache.pre.push_back(std::move(a));
    if (l + 1 < L) h = apply_activation(model.layers[l].activation, cache.pre.back());
  }
  return cache;
}

// Rows of X are samples; returns per-layer caches as matrices (rows = samples).
struct BatchCache {
  std::vector<Matrix> inputs;  // inputs[l]: rows fed into layer l
  std::vector<Matrix> pre;     // pre[l]: affine outputs of layer l
  const Matrix& logits() const { return pre.back(); }
};

inline BatchCache forward_batch(const ModelParams& model, const Matrix& X) {
  if (X.cols() != model.input_dim())
    throw std::invalid_argument("batch has " + std::to_string(X.cols()) + " columns, model expects " +
                                std::to_string(model.input_dim()));
  const std::size_t L = model.layers.size();
  BatchCache cache;
  cache.inputs.reserve(L);
  cache.pre.reserve(L);
  Matrix h = X;
  for (std::size_t l = 0; l < L; ++l) {
    const auto W = model.weight(l);
    const Index in = model.layers[l].input_dim;
    Matrix a = h * W.topRows(in);
    a.rowwise() += W.row(in);
    cache.inputs.push_back(std::move(h));
    if (l + 1 < L) {
      h = (model.layers[l].activation == Activation::Relu) ? a.cwiseMax(0.0) : a;
    }
    cache.pre.push_back(std::move(a));
  }
  return cache;
}

// --- softmax and likelihood ---

inline Vector softmax(const Vector& z, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
  if (!z.allFinite()) throw std::runtime_error("softmax input has non-finite entries");
  Vector s = z / temperature;
  s.array() -= s.maxCoeff();  // shift for overflow safety
  s = s.array().exp();
  return s / s.sum();
}

inline double log_sum_exp(const Vector& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

inline void check_labels(const std::vector<int>& y, Index num_classes) {
  for (std::size_t n = 0; n < y.size(); ++n)
    if (y[n] < 0 || y[n] >= num_classes)
      throw std::invalid_argument("label " + std::to_string(y[n]) + " at sample " + std::to_string(n) +
                                  " outside [0, " + std::to_string(num_classes - 1) + "]");
}

// Sum over samples of ln f_y(x; theta), evaluated through log-sum-exp so that
// saturated logits never round a probability to zero first.
inline double log_likelihood(const ModelParams& model, const Matrix& X, const std::vector<int>& y) {
  if (X.rows() == 0) throw std::invalid_argument("log_likelihood: empty data set");
  if (X.rows() != static_cast<Index>(y.size()))
    throw std::invalid_argument("log_likelihood: input/label count mismatch");
  check_labels(y, model.num_classes());
  const BatchCache cache = forward_batch(model, X);
  const Matrix& G = cache.logits();
  double ll = 0.0;
  for (Index n = 0; n < G.rows(); ++n) {
    const Vector g = G.row(n).transpose();
    ll += g[y[static_cast<std::size_t>(n)]] - log_sum_exp(g);
  }
  return ll;
}

// Gradient of ln f_y with respect to the logits: e_y - f. Single source of
// truth for the identity used by every backward pass.
inline Vector logit_gradient(const Vector& pmf, int label) {
  Vector g = -pmf;
  g[label] += 1.0;
  return g;
}

inline Matrix softmax_rows(const Matrix& G) {
  Matrix F(G.rows(), G.cols());
  for (Index n = 0; n < G.rows(); ++n) {
    Eigen::RowVectorXd s = G.row(n);
    s.array() -= s.maxCoeff();
    s = s.array().exp();
    F.row(n) = s / s.sum();
  }
  return F;
}

namespace detail {

// Backpropagates logit-space gradients Delta (rows = samples) into a flat
// gradient over theta. Shared by the full-likelihood gradient and training.
inline Vector backprop_from_logits(const ModelParams& model, const BatchCache& cache, Matrix delta) {
  Vector grad = Vector::Zero(model.theta.size());
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const auto& s = model.layers[l];
    const Matrix& h = cache.inputs[l];
    Eigen::Map<Matrix> gW(grad.data() + layer_offset(model.layers, l), s.input_dim + 1, s.output_dim);
    gW.topRows(s.input_dim).noalias() = h.transpose() * delta;
    gW.row(s.input_dim) = delta.colwise().sum();
    if (l > 0) {
      const auto W = model.weight(l);
      Matrix back = delta * W.topRows(s.input_dim).transpose();
      if (model.layers[l - 1].activation == Activation::Relu)
        back = back.cwiseProduct((cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
      delta = std::move(back);
    }
  }
  return grad;
}

}  // namespace detail

// Full backprop gradient of sum_n ln f_{y_n}(x_n; theta) over all parameters.
inline Vector grad_loglik(const ModelParams& model, const Matrix& X, const std::vector<int>& y) {
  if (X.rows() == 0) throw std::invalid_argument("grad_loglik: empty data set");
  if (X.rows() != static_cast<Index>(y.size()))
    throw std::invalid_argument("grad_loglik: input/label count mismatch");
  check_labels(y, model.num_classes());
  const BatchCache cache = forward_batch(model, X);
  Matrix delta = -softmax_rows(cache.logits());
  for (Index n = 0; n < delta.rows(); ++n) delta(n, y[static_cast<std::size_t>(n)]) += 1.0;
  return detail::backprop_from_logits(model, cache, std::move(delta));
}

// d g_m / d theta_r for the trailing r layers, one column per class m.
// The layers in front of the subset act as a frozen feature extractor.
inline Matrix jacobian_g(const ModelParams& model, const Vector& x, int r) {
  const int L = static_cast<int>(model.layers.size());
  const Index n_r = trailing_param_count(model.layers, r);  // validates r
  const Index M = model.num_classes();
  const ForwardCache cache = forward(model, x);

  Matrix J = Matrix::Zero(n_r, M);
  for (Index m = 0; m < M; ++m) {
    Vector delta = Vector::Zero(M);
    delta[m] = 1.0;
    for (int l = L - 1; l >= L - r; --l) {
      const auto& s = model.layers[static_cast<std::size_t>(l)];
      const Vector& h = cache.inputs[static_cast<std::size_t>(l)];
      const Index off = layer_offset(model.layers, static_cast<std::size_t>(l));
      Eigen::Map<Matrix> gW(J.col(m).data() + off, s.input_dim + 1, s.output_dim);
      gW.topRows(s.input_dim).noalias() = h * delta.transpose();
      gW.row(s.input_dim) = delta.transpose();
      if (l > L - r) {
        const auto W = model.weight(static_cast<std::size_t>(l));
        Vector back = W.topRows(s.input_dim) * delta;
        if (model.layers[static_cast<std::size_t>(l - 1)].activation == Activation::Relu)
          back = back.cwiseProduct(
              (cache.pre[static_cast<std::size_t>(l - 1)].array() > 0.0).cast<double>().matrix());
        delta = std::move(back);
      }
    }
  }
  return J;
}

// d softmax / d logits at a given pmf: diag(p) - p p^T.
inline Matrix softmax_jacobian(const Vector& pmf) {
  Matrix Jm = -pmf * pmf.transpose();
  Jm.diagonal() += pmf;
  return Jm;
}

}  // namespace duq
