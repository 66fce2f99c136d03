#pragma once

// MAP estimation of the classifier parameters: Adam on the regularized
// cross-entropy objective  J(theta) = -(1/N) sum_n ln f_{y_n} + (lambda/2)|theta|^2.
// The 1/N and 1/2 conventions are fixed here; the matching Laplace prior
// precision is lambda * N (see posterior.hpp).

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "duq/data.hpp"
#include "duq/nn.hpp"

namespace duq {

struct TrainConfig {
  double learning_rate = 1e-4;
  double l2_weight = 1e-4;
  int epochs = 3;
  int batch_size = 64;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

struct TrainReport {
  double final_objective = 0.0;
  std::vector<double> epoch_objective;
  double train_accuracy = 0.0;
};

// He-style fan-in scaling: uniform on [-sqrt(6/fan_in), sqrt(6/fan_in)]
// (std sqrt(2/fan_in)), biases zero. Entries are drawn layer 0 first,
// column-major within each matrix.
inline ModelParams init_params(std::vector<LayerSpec> layers, std::uint64_t seed) {
  validate_layers(layers);
  const Index n_theta = param_count(layers);
  ModelParams model{std::move(layers), Vector::Zero(n_theta)};
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& s = model.layers[l];
    std::uniform_real_distribution<double> u(-std::sqrt(6.0 / s.input_dim), std::sqrt(6.0 / s.input_dim));
    auto W = model.weight(l);
    for (Index c = 0; c < s.output_dim; ++c)
      for (Index r = 0; r < s.input_dim; ++r) W(r, c) = u(rng);
    W.row(s.input_dim).setZero();
  }
  return model;
}

inline double dataset_accuracy(const ModelParams& model, const Matrix& X, const std::vector<int>& y,
                               Index chunk = 8192) {
  Index correct = 0;
  for (Index start = 0; start < X.rows(); start += chunk) {
    const Index rows = std::min(chunk, X.rows() - start);
    const BatchCache cache = forward_batch(model, X.middleRows(start, rows));
    for (Index n = 0; n < rows; ++n) {
      Index best = 0;
      cache.logits().row(n).maxCoeff(&best);
      if (static_cast<int>(best) == y[static_cast<std::size_t>(start + n)]) ++correct;
    }
  }
  return X.rows() > 0 ? static_cast<double>(correct) / static_cast<double>(X.rows()) : 0.0;
}

inline double map_objective(const ModelParams& model, const Matrix& X, const std::vector<int>& y,
                            double l2_weight, Index chunk = 8192) {
  double ll = 0.0;
  for (Index start = 0; start < X.rows(); start += chunk) {
    const Index rows = std::min(chunk, X.rows() - start);
    std::vector<int> yc(y.begin() + start, y.begin() + start + rows);
    ll += log_likelihood(model, X.middleRows(start, rows), yc);
  }
  return -ll / static_cast<double>(X.rows()) + 0.5 * l2_weight * model.theta.squaredNorm();
}

inline std::pair<ModelParams, TrainReport> train_map(ModelParams model, const Dataset& data,
                                                     const TrainConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("train_map: empty data set");
  if (data.inputs.cols() != model.input_dim())
    throw std::invalid_argument("train_map: data dimension does not match model input");
  if (data.num_classes > model.num_classes())
    throw std::invalid_argument("train_map: more classes in data than model outputs");
  if (!(cfg.learning_rate > 0.0) || cfg.l2_weight < 0.0 || cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("train_map: invalid config");
  check_labels(data.labels, model.num_classes());

  const Index N = data.size();
  const Index n_theta = model.theta.size();
  Vector adam_m = Vector::Zero(n_theta);
  Vector adam_v = Vector::Zero(n_theta);
  long step = 0;

  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), Index{0});

  TrainReport report;
  report.epoch_objective.reserve(static_cast<std::size_t>(cfg.epochs));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < N; start += cfg.batch_size) {
      const Index rows = std::min<Index>(cfg.batch_size, N - start);
      Matrix Xb(rows, data.inputs.cols());
      std::vector<int> yb(static_cast<std::size_t>(rows));
      for (Index i = 0; i < rows; ++i) {
        const Index src = order[static_cast<std::size_t>(start + i)];
        Xb.row(i) = data.inputs.row(src);
        yb[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(src)];
      }

      // gradient of the mean cross-entropy on the batch, plus the L2 term
      const BatchCache cache = forward_batch(model, Xb);
      Matrix delta = softmax_rows(cache.logits()) / static_cast<double>(rows);
      for (Index n = 0; n < rows; ++n) delta(n, yb[static_cast<std::size_t>(n)]) -= 1.0 / rows;
      Vector grad = detail::backprop_from_logits(model, cache, std::move(delta));
      grad.noalias() += cfg.l2_weight * model.theta;

      ++step;
      adam_m = cfg.beta1 * adam_m + (1.0 - cfg.beta1) * grad;
      adam_v = cfg.beta2 * adam_v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
      const double m_corr = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double v_corr = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      model.theta.array() -= cfg.learning_rate * (adam_m.array() / m_corr) /
                             ((adam_v.array() / v_corr).sqrt() + cfg.adam_epsilon);
    }

    const double objective = map_objective(model, data.inputs, data.labels, cfg.l2_weight);
    if (!std::isfinite(objective))
      throw std::runtime_error("training diverged (non-finite objective) at epoch " +
                               std::to_string(epoch + 1));
    report.epoch_objective.push_back(objective);
  }

  report.final_objective = report.epoch_objective.back();
  report.train_accuracy = dataset_accuracy(model, data.inputs, data.labels);
  return {std::move(model), std::move(report)};
}

}  // namespace duq
