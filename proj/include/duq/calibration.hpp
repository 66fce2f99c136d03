#pragma once

// Calibration metrics and tuning: Brier score, reliability-diagram binning,
// two ECE variants, temperature and covariance-scaling selection by ECE grid
// search, and report/CSV/SVG emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duq/data.hpp"
#include "duq/nn.hpp"
#include "duq/posterior.hpp"
#include "duq/predict.hpp"

namespace duq {

struct BinStats {
  struct Bin {
    std::int64_t count = 0;
    double accuracy = 0.0;
    double confidence = 0.0;
    double lower = 0.0;
    double upper = 0.0;
  };
  int num_bins = 0;
  std::int64_t total = 0;
  std::vector<Bin> bins;
};

// Assigns each prediction to the bin holding its max probability; bin j
// covers [j/J, (j+1)/J) with the top edge of the last bin inclusive.
inline BinStats bin_predictions(const std::vector<Vector>& preds, const std::vector<int>& labels, int J) {
  if (J < 1) throw std::invalid_argument("bin count must be >= 1");
  if (preds.size() != labels.size()) throw std::invalid_argument("prediction/label count mismatch");
  BinStats stats;
  stats.num_bins = J;
  stats.total = static_cast<std::int64_t>(preds.size());
  stats.bins.resize(static_cast<std::size_t>(J));
  for (int j = 0; j < J; ++j) {
    stats.bins[static_cast<std::size_t>(j)].lower = static_cast<double>(j) / J;
    stats.bins[static_cast<std::size_t>(j)].upper = static_cast<double>(j + 1) / J;
  }
  std::vector<double> acc_sum(static_cast<std::size_t>(J), 0.0);
  std::vector<double> conf_sum(static_cast<std::size_t>(J), 0.0);
  for (std::size_t n = 0; n < preds.size(); ++n) {
    const double maxp = preds[n].maxCoeff();
    const auto j = std::min<std::size_t>(static_cast<std::size_t>(maxp * J), static_cast<std::size_t>(J - 1));
    stats.bins[j].count += 1;
    conf_sum[j] += maxp;
    acc_sum[j] += (argmax_class(preds[n]) == labels[n]) ? 1.0 : 0.0;
  }
  for (std::size_t j = 0; j < stats.bins.size(); ++j) {
    if (stats.bins[j].count > 0) {
      stats.bins[j].accuracy = acc_sum[j] / static_cast<double>(stats.bins[j].count);
      stats.bins[j].confidence = conf_sum[j] / static_cast<double>(stats.bins[j].count);
    }
  }
  return stats;
}

enum class EceVariant {
  InverseCount,  // sum over nonempty bins of |acc - conf| / |B_j|; small bins dominate
  Weighted  // sum of (|B_j| / N) |acc - conf|, the common definition
};

inline double ece(const BinStats& stats, EceVariant variant) {
  double value = 0.0;
  bool any = false;
  for (const auto& b : stats.bins) {
    if (b.count == 0) continue;  // 1/|B_j| undefined for empty bins
    any = true;
    const double gap = std::abs(b.accuracy - b.confidence);
    value += (variant == EceVariant::InverseCount) ? gap / static_cast<double>(b.count)
                                                  : gap * static_cast<double>(b.count) / static_cast<double>(stats.total);
  }
  if (!any) throw std::invalid_argument("ece: all bins are empty");
  return value;
}

inline double brier(const std::vector<Vector>& preds, const std::vector<int>& labels) {
  if (preds.empty()) throw std::invalid_argument("brier: empty prediction set");
  if (preds.size() != labels.size()) throw std::invalid_argument("prediction/label count mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < preds.size(); ++n) {
    Vector d = -preds[n];
    d[labels[n]] += 1.0;
    total += d.squaredNorm();
  }
  return total / static_cast<double>(preds.size());
}

inline double pmf_accuracy(const std::vector<Vector>& preds, const std::vector<int>& labels) {
  if (preds.empty()) throw std::invalid_argument("accuracy: empty prediction set");
  std::int64_t correct = 0;
  for (std::size_t n = 0; n < preds.size(); ++n)
    if (argmax_class(preds[n]) == labels[n]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// sum_n ln p_hat(y_n); probabilities floored at 1e-12 so that a class an MC
// estimate assigned zero mass cannot produce an infinite metric.
inline double pmf_log_likelihood(const std::vector<Vector>& preds, const std::vector<int>& labels) {
  if (preds.empty()) throw std::invalid_argument("log likelihood: empty prediction set");
  double ll = 0.0;
  for (std::size_t n = 0; n < preds.size(); ++n)
    ll += std::log(std::max(preds[n][labels[n]], 1e-12));
  return ll;
}

struct CalibrationReport {
  double accuracy = 0.0;
  double log_likelihood = 0.0;  // natural log, summed; print /1e3 for table units
  double brier = 0.0;
  double ece_inverse_count = 0.0;
  double ece_weighted = 0.0;
  int num_bins = 0;
  BinStats bins;
  double temperature = 1.0;
  double tc = 1.0;
};

inline CalibrationReport make_report(const std::vector<Vector>& preds, const std::vector<int>& labels,
                                     int J = 10, double temperature = 1.0, double tc = 1.0) {
  CalibrationReport rep;
  rep.bins = bin_predictions(preds, labels, J);
  rep.num_bins = J;
  rep.accuracy = pmf_accuracy(preds, labels);
  rep.log_likelihood = pmf_log_likelihood(preds, labels);
  rep.brier = brier(preds, labels);
  rep.ece_inverse_count = ece(rep.bins, EceVariant::InverseCount);
  rep.ece_weighted = ece(rep.bins, EceVariant::Weighted);
  rep.temperature = temperature;
  rep.tc = tc;
  return rep;
}

inline Vector log_spaced_grid(double lo, double hi, int n) {
  if (!(lo > 0.0) || !(hi >= lo) || n < 1) throw std::invalid_argument("invalid grid specification");
  Vector g(n);
  if (n == 1) {
    g[0] = lo;
    return g;
  }
  const double llo = std::log10(lo), lhi = std::log10(hi);
  for (int i = 0; i < n; ++i) g[i] = std::pow(10.0, llo + (lhi - llo) * i / (n - 1));
  return g;
}

inline Vector default_temperature_grid() { return log_spaced_grid(0.1, 10.0, 25); }
inline Vector default_tc_grid() { return log_spaced_grid(1.0, 100.0, 25); }

// Per-input seeds for reproducible pipelines: input i uses base + i.
inline std::uint64_t derive_seed(std::uint64_t base, Index index) {
  return base + static_cast<std::uint64_t>(index);
}

inline Matrix dataset_logits(const ModelParams& model, const Matrix& X, Index chunk = 8192) {
  Matrix G(X.rows(), model.num_classes());
  for (Index start = 0; start < X.rows(); start += chunk) {
    const Index rows = std::min(chunk, X.rows() - start);
    G.middleRows(start, rows) = forward_batch(model, X.middleRows(start, rows)).logits();
  }
  return G;
}

// Grid argmin of the inverse-count ECE of the temperature-scaled point PMF.
// Ties resolve to the smallest grid value.
inline double tune_temperature(const ModelParams& model, const Dataset& val, const Vector& grid,
                               int J = 10) {
  if (grid.size() == 0) throw std::invalid_argument("tune_temperature: empty grid");
  if (val.size() == 0) throw std::invalid_argument("tune_temperature: empty validation set");
  const Matrix G = dataset_logits(model, val.inputs);
  std::vector<double> sorted(grid.data(), grid.data() + grid.size());
  std::sort(sorted.begin(), sorted.end());

  double best_t = sorted.front();
  double best_ece = std::numeric_limits<double>::infinity();
  std::vector<Vector> preds(static_cast<std::size_t>(G.rows()));
  for (const double T : sorted) {
    for (Index n = 0; n < G.rows(); ++n) preds[static_cast<std::size_t>(n)] = softmax(G.row(n).transpose(), T);
    const double e = ece(bin_predictions(preds, val.labels, J), EceVariant::InverseCount);
    if (e < best_ece) {
      best_ece = e;
      best_t = T;
    }
  }
  return best_t;
}

// Grid argmin of the inverse-count ECE of the marginalized PMF with the logit
// covariance scaled by the candidate factor. The same seeds are used at every
// grid point so the search is deterministic.
inline double tune_tc(const ModelParams& model, const PosteriorCovariance& post, const Dataset& val,
                      const Vector& grid, std::int64_t K, std::uint64_t seed, int J = 10) {
  if (grid.size() == 0) throw std::invalid_argument("tune_tc: empty grid");
  if (val.size() == 0) throw std::invalid_argument("tune_tc: empty validation set");
  const std::vector<LogitGaussian> lgs = delta_propagate_batch(model, post, val.inputs);
  std::vector<double> sorted(grid.data(), grid.data() + grid.size());
  std::sort(sorted.begin(), sorted.end());

  double best_tc = sorted.front();
  double best_ece = std::numeric_limits<double>::infinity();
  std::vector<Vector> preds(lgs.size());
  for (const double t : sorted) {
    for (std::size_t i = 0; i < lgs.size(); ++i) {
      const LogitGaussian scaled{lgs[i].mean, t * lgs[i].cov};
      preds[i] = mc_marginalize(scaled, K, derive_seed(seed, static_cast<Index>(i))).pmf;
    }
    const double e = ece(bin_predictions(preds, val.labels, J), EceVariant::InverseCount);
    if (e < best_ece) {
      best_ece = e;
      best_tc = t;
    }
  }
  return best_tc;
}

enum class PredictionMethod { Standard, TempScaled, Proposed, ProposedTc };

struct ReportSettings {
  PredictionMethod method = PredictionMethod::Standard;
  double temperature = 1.0;
  double tc = 1.0;
  int num_bins = 10;
  std::int64_t mc_samples = 1000;
  std::uint64_t seed = 1;
};

inline std::vector<Vector> method_predictions(const ModelParams& model, const PosteriorCovariance* post,
                                              const Matrix& X, const ReportSettings& s) {
  std::vector<Vector> preds(static_cast<std::size_t>(X.rows()));
  if (s.method == PredictionMethod::Standard || s.method == PredictionMethod::TempScaled) {
    const double T = s.method == PredictionMethod::Standard ? 1.0 : s.temperature;
    const Matrix G = dataset_logits(model, X);
    for (Index n = 0; n < G.rows(); ++n) preds[static_cast<std::size_t>(n)] = softmax(G.row(n).transpose(), T);
    return preds;
  }
  if (!post) throw std::invalid_argument("marginalized prediction methods need a posterior covariance");
  const double t = s.method == PredictionMethod::ProposedTc ? s.tc : 1.0;
  const std::vector<LogitGaussian> lgs = delta_propagate_batch(model, *post, X);
  for (std::size_t i = 0; i < lgs.size(); ++i) {
    const LogitGaussian scaled{lgs[i].mean, t * lgs[i].cov};
    preds[i] = mc_marginalize(scaled, s.mc_samples, derive_seed(s.seed, static_cast<Index>(i))).pmf;
  }
  return preds;
}

inline CalibrationReport run_report(const ModelParams& model, const PosteriorCovariance* post,
                                    const Dataset& data, const ReportSettings& s) {
  const std::vector<Vector> preds = method_predictions(model, post, data.inputs, s);
  return make_report(preds, data.labels, s.num_bins, s.temperature,
                     s.method == PredictionMethod::ProposedTc ? s.tc : 1.0);
}

// CSV rows for reliability plotting; one row per bin, empty bins included
// with zero accuracy/confidence.
inline void write_reliability_csv(std::ostream& os, const BinStats& stats) {
  os << "bin_lower,bin_upper,count,accuracy,confidence\n";
  const auto old_precision = os.precision(12);
  for (const auto& b : stats.bins)
    os << b.lower << ',' << b.upper << ',' << b.count << ',' << b.accuracy << ',' << b.confidence << '\n';
  os.precision(old_precision);
}

// Minimal reliability bar chart: per-bin accuracy bars against the diagonal.
inline void write_reliability_svg(std::ostream& os, const BinStats& stats) {
  const int size = 360, margin = 40;
  const double plot = size - 2.0 * margin;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
  os << "  <rect width=\"" << size << "\" height=\"" << size << "\" fill=\"white\"/>\n";
  for (const auto& b : stats.bins) {
    if (b.count == 0) continue;
    const double x = margin + b.lower * plot;
    const double w = (b.upper - b.lower) * plot;
    const double h = b.accuracy * plot;
    os << "  <rect x=\"" << x << "\" y=\"" << margin + plot - h << "\" width=\"" << w << "\" height=\"" << h
       << "\" fill=\"#4682b4\" stroke=\"#333\" stroke-width=\"0.5\"/>\n";
  }
  os << "  <line x1=\"" << margin << "\" y1=\"" << margin + plot << "\" x2=\"" << margin + plot << "\" y2=\""
     << margin << "\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n";
  os << "  <line x1=\"" << margin << "\" y1=\"" << margin + plot << "\" x2=\"" << margin + plot << "\" y2=\""
     << margin + plot << "\" stroke=\"black\"/>\n";
  os << "  <line x1=\"" << margin << "\" y1=\"" << margin + plot << "\" x2=\"" << margin << "\" y2=\""
     << margin << "\" stroke=\"black\"/>\n";
  os << "  <text x=\"" << margin + plot / 2 << "\" y=\"" << size - 8
     << "\" text-anchor=\"middle\" font-size=\"12\">confidence</text>\n";
  os << "  <text x=\"12\" y=\"" << margin + plot / 2
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 " << margin + plot / 2
     << ")\">accuracy</text>\n";
  os << "</svg>\n";
}

}  // namespace duq
