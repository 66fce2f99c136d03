// duq: train a classifier, build its trailing-layer posterior covariance,
// predict with uncertainty, fuse, assess risk and calibrate.
//
// Exit codes: 0 success, 1 usage error, 2 data/numeric error.

#include <CLI11.hpp>

#include <duq/duq.hpp>

#include <cstdio>
#include <iostream>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace duq;

struct DataArgs {
  std::string images;
  std::string labels;
  std::int64_t skip = 0;
  std::int64_t limit = 0;  // 0 = all
};

void add_slice_options(CLI::App* cmd, DataArgs& args) {
  cmd->add_option("--skip", args.skip, "Skip the first N samples");
  cmd->add_option("--limit", args.limit, "Use at most N samples after --skip (0 = all)");
}

void apply_slice(Dataset& d, const DataArgs& args) {
  const Index total = d.size();
  const Index skip = std::min<Index>(args.skip, total);
  Index take = total - skip;
  if (args.limit > 0) take = std::min<Index>(take, args.limit);
  d.inputs = Matrix(d.inputs.middleRows(skip, take));
  d.labels = std::vector<int>(d.labels.begin() + skip, d.labels.begin() + skip + take);
}

Dataset load_labeled(const DataArgs& args, const std::string& split) {
  Dataset d = load_idx(args.images, args.labels, split);
  apply_slice(d, args);
  return d;
}

Matrix load_inputs(const DataArgs& args) {
  Matrix X = load_idx_images(args.images);
  Dataset d;
  d.inputs = std::move(X);
  d.labels.assign(static_cast<std::size_t>(d.inputs.rows()), 0);
  apply_slice(d, args);
  return std::move(d.inputs);
}

std::vector<LayerSpec> layers_from_dims(const std::vector<Index>& dims) {
  if (dims.size() < 2) throw std::invalid_argument("--layers needs at least two comma-separated sizes");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers.push_back({dims[i], dims[i + 1],
                      i + 2 == dims.size() ? Activation::Identity : Activation::Relu});
  return layers;
}

ProgressFn stderr_progress(const std::string& what) {
  auto last = std::make_shared<int>(-1);
  return [what, last](Index done, Index total) {
    const int pct = static_cast<int>(100 * done / std::max<Index>(total, 1));
    if (pct / 10 > *last / 10 || done == total) {
      std::fprintf(stderr, "%s: %lld/%lld (%d%%)\n", what.c_str(), static_cast<long long>(done),
                   static_cast<long long>(total), pct);
      *last = pct;
    }
  };
}

void print_metrics(const CalibrationReport& rep) {
  std::printf("accuracy %.6f\n", rep.accuracy);
  std::printf("ll_e3 %.6f\n", rep.log_likelihood / 1e3);
  std::printf("brier %.6f\n", rep.brier);
  std::printf("ece_inverse_count %.6f\n", rep.ece_inverse_count);
  std::printf("ece_weighted %.6f\n", rep.ece_weighted);
}

PosteriorCovariance load_scaled_posterior(const std::string& path, double tc) {
  PosteriorCovariance post = load_posterior(path);
  if (tc != 1.0) {
    if (tc < 1.0)
      std::fprintf(stderr, "warning: tc = %g < 1 deflates the covariance; values >= 1 are recommended\n",
                   tc);
    scale_covariance(post, tc);
  }
  return post;
}

PredictionSet predict_set(const ModelParams& model, const PosteriorCovariance& post, const Matrix& X,
                          std::int64_t samples, std::uint64_t seed) {
  PredictionSet set;
  set.mc_samples = samples;
  set.base_seed = seed;
  set.tc = post.tc;
  set.gaussians = delta_propagate_batch(model, post, X);
  set.estimates.reserve(set.gaussians.size());
  for (std::size_t i = 0; i < set.gaussians.size(); ++i)
    set.estimates.push_back(
        mc_marginalize(set.gaussians[i], samples, derive_seed(seed, static_cast<Index>(i))));
  return set;
}

int run_train(const DataArgs& data_args, const std::vector<Index>& dims, const TrainConfig& cfg,
              const std::string& out) {
  const Dataset data = load_labeled(data_args, "train");
  std::printf("training on %lld samples, %d classes\n", static_cast<long long>(data.size()),
              data.num_classes);
  const auto [model, report] = train_map(init_params(layers_from_dims(dims), cfg.seed), data, cfg);
  for (std::size_t e = 0; e < report.epoch_objective.size(); ++e)
    std::printf("epoch %zu objective %.6f\n", e + 1, report.epoch_objective[e]);
  std::printf("train accuracy %.4f\n", report.train_accuracy);
  save_model(out, model);
  std::printf("saved %s\n", out.c_str());
  return 0;
}

int run_covariance(const std::string& model_path, const DataArgs& data_args, int r, double l2,
                   double prior_precision, const std::string& method, Index block,
                   const std::string& out) {
  const ModelParams model = load_model(model_path);
  const Matrix X = load_inputs(data_args);
  const double prior = prior_precision > 0.0 ? prior_precision : l2 * static_cast<double>(X.rows());
  const CovMethod m = method == "direct" ? CovMethod::Direct : CovMethod::Recursive;
  std::printf("accumulating Fisher information over %lld samples (n_r = %lld, prior %.6g, %s)\n",
              static_cast<long long>(X.rows()),
              static_cast<long long>(trailing_param_count(model.layers, r)), prior, method.c_str());
  const PosteriorCovariance post =
      compute_posterior(model, X, r, prior, m, block, stderr_progress("covariance"));
  save_posterior(out, post);
  std::printf("saved %s\n", out.c_str());
  return 0;
}

int run_predict(const std::string& model_path, const std::string& posterior_path,
                const DataArgs& data_args, const std::vector<Index>& indices, double tc,
                std::int64_t samples, std::uint64_t seed, const std::string& out) {
  const ModelParams model = load_model(model_path);
  const PosteriorCovariance post = load_scaled_posterior(posterior_path, tc);
  Matrix X;
  if (indices.empty()) {
    X = load_inputs(data_args);
  } else {
    const Matrix all = load_idx_images(data_args.images);
    X.resize(static_cast<Index>(indices.size()), all.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] < 0 || indices[i] >= all.rows())
        throw std::runtime_error("--indices entry " + std::to_string(indices[i]) + " outside 0.." +
                                 std::to_string(all.rows() - 1));
      X.row(static_cast<Index>(i)) = all.row(indices[i]);
    }
  }
  const PredictionSet set = predict_set(model, post, X, samples, seed);
  for (std::size_t i = 0; i < set.estimates.size(); ++i) {
    const auto& est = set.estimates[i];
    std::printf("input %zu: class %d p_max %.4f cov_trace %.6g\n", i, argmax_class(est.pmf) + 1,
                est.pmf.maxCoeff(), est.cov.trace());
  }
  save_prediction_set(out, set);
  std::printf("saved %s\n", out.c_str());
  return 0;
}

int run_fuse_classifiers(const std::vector<std::string>& inputs, std::int64_t samples,
                         std::uint64_t seed, const std::string& out) {
  std::vector<PredictionSet> sets;
  for (const auto& path : inputs) sets.push_back(load_prediction_set(path));
  const std::size_t count = sets.front().gaussians.size();
  for (const auto& s : sets)
    if (s.gaussians.size() != count || s.gaussians.front().mean.size() != sets.front().gaussians.front().mean.size())
      throw std::runtime_error("fuse: prediction artifacts disagree on input count or class count");

  PredictionSet fused;
  fused.mc_samples = samples;
  fused.base_seed = seed;
  fused.provenance = inputs;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<LogitGaussian> lgs;
    for (const auto& s : sets) lgs.push_back(s.gaussians[i]);
    fused.gaussians.push_back(fuse_classifiers(lgs, inputs).lg);
    fused.estimates.push_back(
        mc_marginalize(fused.gaussians.back(), samples, derive_seed(seed, static_cast<Index>(i))));
  }
  save_prediction_set(out, fused);
  std::printf("fused %zu classifiers over %zu inputs; saved %s\n", sets.size(), count, out.c_str());
  return 0;
}

int run_fuse_same_class(const std::string& model_path, const std::string& posterior_path,
                        const DataArgs& data_args, const std::vector<Index>& indices, double tc,
                        std::int64_t samples, std::uint64_t seed, const std::string& out) {
  if (indices.empty()) throw std::runtime_error("fuse --mode same-class needs --indices");
  const ModelParams model = load_model(model_path);
  const PosteriorCovariance post = load_scaled_posterior(posterior_path, tc);
  const Matrix all = load_idx_images(data_args.images);
  std::vector<Vector> xs;
  std::vector<std::string> provenance;
  for (const Index idx : indices) {
    if (idx < 0 || idx >= all.rows())
      throw std::runtime_error("--indices entry " + std::to_string(idx) + " outside 0.." +
                               std::to_string(all.rows() - 1));
    xs.push_back(all.row(idx).transpose());
    provenance.push_back(data_args.images + ":" + std::to_string(idx));
  }
  const FusedLogit fused = fuse_same_class(model, post, xs, provenance);
  PredictionSet set;
  set.mc_samples = samples;
  set.base_seed = seed;
  set.tc = post.tc;
  set.provenance = fused.provenance;
  set.gaussians = {fused.lg};
  set.estimates = {mc_marginalize(fused.lg, samples, seed)};
  save_prediction_set(out, set);
  const auto& est = set.estimates.front();
  std::printf("fused %zu same-class inputs: class %d p_max %.4f; saved %s\n", xs.size(),
              argmax_class(est.pmf) + 1, est.pmf.maxCoeff(), out.c_str());
  return 0;
}

int run_risk(const std::string& pred_path, Index index, int class_1based, double threshold) {
  const PredictionSet set = load_prediction_set(pred_path);
  if (index < 0 || index >= static_cast<Index>(set.gaussians.size()))
    throw std::runtime_error("--index outside the prediction artifact (count " +
                             std::to_string(set.gaussians.size()) + ")");
  const auto& est = set.estimates[static_cast<std::size_t>(index)];
  const int m = class_1based - 1;
  if (m < 0 || m >= set.gaussians[static_cast<std::size_t>(index)].mean.size())
    throw std::runtime_error("--class outside 1.." +
                             std::to_string(set.gaussians[static_cast<std::size_t>(index)].mean.size()));
  const double risk =
      risk_assess(set.gaussians[static_cast<std::size_t>(index)], est.samples, est.seed, m, threshold);
  std::printf("%.6f\n", risk);
  return 0;
}

int run_calibrate(const std::string& model_path, const std::string& posterior_path,
                  const DataArgs& data_args, const std::string& tune, double grid_min, double grid_max,
                  int grid_points, std::int64_t samples, std::uint64_t seed, int bins) {
  const ModelParams model = load_model(model_path);
  const Dataset val = load_labeled(data_args, "val");
  ReportSettings settings;
  settings.num_bins = bins;
  settings.mc_samples = samples;
  settings.seed = seed;

  if (tune == "T") {
    const Vector grid = log_spaced_grid(grid_min > 0 ? grid_min : 0.1, grid_max > 0 ? grid_max : 10.0,
                                        grid_points);
    const double T = tune_temperature(model, val, grid, bins);
    std::printf("T %.6g\n", T);
    settings.method = PredictionMethod::TempScaled;
    settings.temperature = T;
    print_metrics(run_report(model, nullptr, val, settings));
    return 0;
  }
  if (tune == "tc") {
    if (posterior_path.empty()) throw std::runtime_error("calibrate --tune tc needs --posterior");
    const PosteriorCovariance post = load_posterior(posterior_path);
    const Vector grid = log_spaced_grid(grid_min > 0 ? grid_min : 1.0, grid_max > 0 ? grid_max : 100.0,
                                        grid_points);
    const double tc = tune_tc(model, post, val, grid, samples, seed, bins);
    std::printf("tc %.6g\n", tc);
    settings.method = PredictionMethod::ProposedTc;
    settings.tc = tc;
    print_metrics(run_report(model, &post, val, settings));
    return 0;
  }
  throw std::runtime_error("--tune must be T or tc");
}

int run_report_cmd(const std::string& model_path, const std::string& posterior_path,
                   const DataArgs& data_args, const std::string& method, double temperature, double tc,
                   std::int64_t samples, std::uint64_t seed, int bins, const std::string& csv_out,
                   const std::string& svg_out) {
  const ModelParams model = load_model(model_path);
  const Dataset val = load_labeled(data_args, "report");
  ReportSettings settings;
  settings.temperature = temperature;
  settings.tc = tc;
  settings.num_bins = bins;
  settings.mc_samples = samples;
  settings.seed = seed;
  std::optional<PosteriorCovariance> post;
  if (method == "standard")
    settings.method = PredictionMethod::Standard;
  else if (method == "temp")
    settings.method = PredictionMethod::TempScaled;
  else if (method == "proposed" || method == "proposed-tc") {
    settings.method = method == "proposed" ? PredictionMethod::Proposed : PredictionMethod::ProposedTc;
    if (posterior_path.empty()) throw std::runtime_error("report --method " + method + " needs --posterior");
    post = load_posterior(posterior_path);
  } else {
    throw std::runtime_error("--method must be standard, temp, proposed or proposed-tc");
  }

  const CalibrationReport rep = run_report(model, post ? &*post : nullptr, val, settings);
  print_metrics(rep);
  if (!csv_out.empty()) {
    std::ofstream os(csv_out);
    if (!os) throw std::runtime_error("cannot open " + csv_out);
    write_reliability_csv(os, rep.bins);
    std::printf("wrote %s\n", csv_out.c_str());
  }
  if (!svg_out.empty()) {
    std::ofstream os(svg_out);
    if (!os) throw std::runtime_error("cannot open " + svg_out);
    write_reliability_svg(os, rep.bins);
    std::printf("wrote %s\n", svg_out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uncertainty-quantified neural network classification"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "MAP-train a classifier and save a model artifact");
  DataArgs train_data;
  std::vector<Index> train_dims = {784, 300, 100, 40, 10};
  TrainConfig cfg;
  std::string train_out;
  train->set_config("--config", "", "Config file (INI); command-line flags override it");
  train->add_option("--images", train_data.images, "IDX image file")->required();
  train->add_option("--labels", train_data.labels, "IDX label file")->required();
  train->add_option("--layers", train_dims, "Comma-separated layer sizes")->delimiter(',');
  train->add_option("--lr", cfg.learning_rate, "Adam learning rate");
  train->add_option("--l2", cfg.l2_weight, "L2 regularization weight");
  train->add_option("--epochs", cfg.epochs, "Training epochs");
  train->add_option("--batch", cfg.batch_size, "Mini-batch size");
  train->add_option("--seed", cfg.seed, "Seed for init and shuffling");
  add_slice_options(train, train_data);
  train->add_option("--out", train_out, "Output model artifact")->required();
  train->callback([&] { run_train(train_data, train_dims, cfg, train_out); });

  // covariance
  auto* cov = app.add_subcommand("covariance", "Accumulate the trailing-layer posterior covariance");
  DataArgs cov_data;
  std::string cov_model, cov_out, cov_method = "recursive";
  int cov_r = 2;
  double cov_l2 = 1e-4, cov_prior = 0.0;
  Index cov_block = 64;
  cov->add_option("--model", cov_model, "Model artifact")->required();
  cov->add_option("--images", cov_data.images, "IDX image file (training inputs)")->required();
  cov->add_option("--layers", cov_r, "Number of trailing layers r");
  cov->add_option("--method", cov_method, "recursive or direct")
      ->check(CLI::IsMember({"recursive", "direct"}));
  cov->add_option("--block", cov_block, "Samples per recursive block update");
  cov->add_option("--l2", cov_l2, "Training L2 weight (prior precision = l2 * N)");
  cov->add_option("--prior-precision", cov_prior, "Explicit prior precision (overrides --l2 * N)");
  add_slice_options(cov, cov_data);
  cov->add_option("--out", cov_out, "Output posterior artifact")->required();
  cov->callback(
      [&] { run_covariance(cov_model, cov_data, cov_r, cov_l2, cov_prior, cov_method, cov_block, cov_out); });

  // predict
  auto* pred = app.add_subcommand("predict", "Delta-propagate and MC-marginalize selected inputs");
  DataArgs pred_data;
  std::string pred_model, pred_post, pred_out;
  std::vector<Index> pred_indices;
  double pred_tc = 1.0;
  std::int64_t pred_samples = 1000;
  std::uint64_t pred_seed = 1;
  pred->add_option("--model", pred_model, "Model artifact")->required();
  pred->add_option("--posterior", pred_post, "Posterior artifact")->required();
  pred->add_option("--images", pred_data.images, "IDX image file")->required();
  pred->add_option("--indices", pred_indices, "Comma-separated row indices (default: all rows)")
      ->delimiter(',');
  pred->add_option("--samples", pred_samples, "MC sample count K");
  pred->add_option("--seed", pred_seed, "Base MC seed (input i uses seed + i)");
  pred->add_option("--tc", pred_tc, "Covariance scaling factor");
  add_slice_options(pred, pred_data);
  pred->add_option("--out", pred_out, "Output prediction artifact")->required();
  pred->callback([&] {
    run_predict(pred_model, pred_post, pred_data, pred_indices, pred_tc, pred_samples, pred_seed, pred_out);
  });

  // fuse
  auto* fuse = app.add_subcommand("fuse", "Fuse predictions (independent classifiers or same-class inputs)");
  std::string fuse_mode, fuse_model, fuse_post, fuse_out;
  DataArgs fuse_data;
  std::vector<std::string> fuse_inputs;
  std::vector<Index> fuse_indices;
  double fuse_tc = 1.0;
  std::int64_t fuse_samples = 1000;
  std::uint64_t fuse_seed = 1;
  fuse->add_option("--mode", fuse_mode, "classifiers or same-class")
      ->required()
      ->check(CLI::IsMember({"classifiers", "same-class"}));
  fuse->add_option("inputs", fuse_inputs, "Prediction artifacts (classifiers mode)");
  fuse->add_option("--model", fuse_model, "Model artifact (same-class mode)");
  fuse->add_option("--posterior", fuse_post, "Posterior artifact (same-class mode)");
  fuse->add_option("--images", fuse_data.images, "IDX image file (same-class mode)");
  fuse->add_option("--indices", fuse_indices, "Rows known to share a class")->delimiter(',');
  fuse->add_option("--tc", fuse_tc, "Covariance scaling factor (same-class mode)");
  fuse->add_option("--samples", fuse_samples, "MC sample count K");
  fuse->add_option("--seed", fuse_seed, "Base MC seed");
  fuse->add_option("--out", fuse_out, "Output prediction artifact")->required();
  fuse->callback([&] {
    if (fuse_mode == "classifiers") {
      if (fuse_inputs.empty()) throw std::runtime_error("fuse --mode classifiers needs input artifacts");
      run_fuse_classifiers(fuse_inputs, fuse_samples, fuse_seed, fuse_out);
    } else {
      run_fuse_same_class(fuse_model, fuse_post, fuse_data, fuse_indices, fuse_tc, fuse_samples, fuse_seed,
                          fuse_out);
    }
  });

  // risk
  auto* risk = app.add_subcommand("risk", "Threshold-exceedance probability of a stored prediction");
  std::string risk_pred;
  Index risk_index = 0;
  int risk_class = 0;
  double risk_threshold = 0.0;
  risk->add_option("--pred", risk_pred, "Prediction artifact")->required();
  risk->add_option("--index", risk_index, "Input index inside the artifact");
  risk->add_option("--class", risk_class, "Class (1-based)")->required();
  risk->add_option("--threshold", risk_threshold, "Exceedance threshold in [0, 1]")->required();
  risk->callback([&] { run_risk(risk_pred, risk_index, risk_class, risk_threshold); });

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Tune T or tc by ECE grid search on validation data");
  DataArgs cal_data;
  std::string cal_model, cal_post, cal_tune;
  double cal_gmin = 0.0, cal_gmax = 0.0;
  int cal_gpts = 25, cal_bins = 10;
  std::int64_t cal_samples = 1000;
  std::uint64_t cal_seed = 1;
  cal->add_option("--model", cal_model, "Model artifact")->required();
  cal->add_option("--posterior", cal_post, "Posterior artifact (needed for --tune tc)");
  cal->add_option("--images", cal_data.images, "Validation IDX image file")->required();
  cal->add_option("--labels", cal_data.labels, "Validation IDX label file")->required();
  cal->add_option("--tune", cal_tune, "T or tc")->required()->check(CLI::IsMember({"T", "tc"}));
  cal->add_option("--grid-min", cal_gmin, "Grid lower bound (default 0.1 for T, 1 for tc)");
  cal->add_option("--grid-max", cal_gmax, "Grid upper bound (default 10 for T, 100 for tc)");
  cal->add_option("--grid-points", cal_gpts, "Log-spaced grid size");
  cal->add_option("--samples", cal_samples, "MC sample count K");
  cal->add_option("--seed", cal_seed, "Base MC seed");
  cal->add_option("--bins", cal_bins, "Reliability bins J");
  add_slice_options(cal, cal_data);
  cal->callback([&] {
    run_calibrate(cal_model, cal_post, cal_data, cal_tune, cal_gmin, cal_gmax, cal_gpts, cal_samples,
                  cal_seed, cal_bins);
  });

  // report
  auto* rep = app.add_subcommand("report", "Calibration metrics, reliability CSV and optional SVG");
  DataArgs rep_data;
  std::string rep_model, rep_post, rep_method = "standard", rep_csv, rep_svg;
  double rep_T = 1.0, rep_tc = 1.0;
  int rep_bins = 10;
  std::int64_t rep_samples = 1000;
  std::uint64_t rep_seed = 1;
  rep->add_option("--model", rep_model, "Model artifact")->required();
  rep->add_option("--posterior", rep_post, "Posterior artifact (proposed methods)");
  rep->add_option("--images", rep_data.images, "IDX image file")->required();
  rep->add_option("--labels", rep_data.labels, "IDX label file")->required();
  rep->add_option("--method", rep_method, "standard, temp, proposed or proposed-tc")
      ->check(CLI::IsMember({"standard", "temp", "proposed", "proposed-tc"}));
  rep->add_option("--temperature", rep_T, "Temperature for --method temp");
  rep->add_option("--tc", rep_tc, "Covariance scaling for --method proposed-tc");
  rep->add_option("--samples", rep_samples, "MC sample count K");
  rep->add_option("--seed", rep_seed, "Base MC seed");
  rep->add_option("--bins", rep_bins, "Reliability bins J");
  rep->add_option("--out", rep_csv, "Reliability CSV output path");
  rep->add_option("--svg", rep_svg, "Reliability SVG output path");
  add_slice_options(rep, rep_data);
  rep->callback([&] {
    run_report_cmd(rep_model, rep_post, rep_data, rep_method, rep_T, rep_tc, rep_samples, rep_seed,
                   rep_bins, rep_csv, rep_svg);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
