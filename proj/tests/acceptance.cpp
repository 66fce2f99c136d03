// Acceptance suite: exercises every acceptance criterion end to end and
// prints one PASS/FAIL line per criterion. Exits nonzero if any fail.
//
// MNIST criteria read the official IDX files from $MNIST_DIR
// (default /root/data/mnist).

#include <duq/duq.hpp>

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace duq;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double rel_frobenius(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

double min_eigenvalue(const Matrix& sym) {
  return Eigen::SelfAdjointEigenSolver<Matrix>(sym).eigenvalues().minCoeff();
}

std::vector<LayerSpec> layer_chain(const std::vector<Index>& dims) {
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers.push_back({dims[i], dims[i + 1],
                      i + 2 == dims.size() ? Activation::Identity : Activation::Relu});
  return layers;
}

ModelParams random_model(const std::vector<Index>& dims, std::uint64_t seed) {
  ModelParams model = init_params(layer_chain(dims), seed);
  std::mt19937_64 rng(seed * 7919 + 13);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (Index i = 0; i < model.theta.size(); ++i) model.theta[i] += noise(rng);
  return model;
}

Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = n(rng);
  return m;
}

Vector random_vector(Index size, std::uint64_t seed, double scale = 1.0) {
  return random_matrix(size, 1, seed, scale).col(0);
}

Matrix random_spd(Index n, std::uint64_t seed, double floor = 0.1) {
  const Matrix a = random_matrix(n, n, seed);
  Matrix m = a * a.transpose() / static_cast<double>(n);
  m.diagonal().array() += floor;
  return m;
}

struct MnistState {
  bool loaded = false;
  std::string message;
  Dataset train;  // first 50000
  Dataset val;    // last 10000 of the training files
  Dataset test;   // official test set
  ModelParams model{{}, Vector()};
  double test_accuracy = 0.0;
  bool has_posterior = false;
  PosteriorCovariance posterior;
};

MnistState& mnist() {
  static MnistState state;
  return state;
}

void load_mnist_once() {
  MnistState& s = mnist();
  if (s.loaded || !s.message.empty()) return;
  const char* env = std::getenv("MNIST_DIR");
  const std::filesystem::path dir = env ? env : "/root/data/mnist";
  const auto train_images = dir / "train-images-idx3-ubyte";
  if (!std::filesystem::exists(train_images)) {
    s.message = "MNIST not found under " + dir.string() + " (set MNIST_DIR)";
    return;
  }
  Dataset full = load_idx(train_images.string(), (dir / "train-labels-idx1-ubyte").string(), "train");
  if (full.size() != 60000 || full.inputs.cols() != 784)
    throw std::runtime_error("unexpected MNIST training dimensions");
  s.test = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                    (dir / "t10k-labels-idx1-ubyte").string(), "test");

  s.train.inputs = full.inputs.topRows(50000);
  s.train.labels.assign(full.labels.begin(), full.labels.begin() + 50000);
  s.train.num_classes = 10;
  s.train.split = "train";
  s.val.inputs = full.inputs.bottomRows(10000);
  s.val.labels.assign(full.labels.begin() + 50000, full.labels.end());
  s.val.num_classes = 10;
  s.val.split = "val";
  s.loaded = true;
}

// --- criteria ---

std::string criterion_recursive_direct() {
  const auto start = Clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Index in = 2 + static_cast<Index>(rng() % 4);
    const Index hidden = 3 + static_cast<Index>(rng() % 5);
    const Index classes = 2 + static_cast<Index>(rng() % 4);  // M <= 5
    const int r = 1 + static_cast<int>(rng() % 2);
    const Index N = 100 + static_cast<Index>(rng() % 401);  // N <= 500
    const ModelParams model = random_model({in, hidden, classes}, 100 + i);
    if (trailing_param_count(model.layers, r) > 200) continue;
    const Matrix X = random_matrix(N, in, 200 + i);
    const double prior = 0.5 + 0.1 * i;
    const PosteriorCovariance direct = direct_covariance(model, X, r, prior);
    const PosteriorCovariance recursive = compute_posterior(model, X, r, prior, CovMethod::Recursive, 1);
    worst = std::max(worst, rel_frobenius(recursive.P, direct.P));
  }
  const double elapsed = seconds_since(start);
  std::ostringstream os;
  os << "worst rel Frobenius " << worst << ", " << elapsed << " s";
  if (worst > 1e-8) throw std::runtime_error("recursion vs direct: " + os.str());
  if (elapsed > 30.0) throw std::runtime_error("too slow: " + os.str());
  return os.str();
}

std::string criterion_gradients() {
  const auto start = Clock::now();
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const ModelParams model = random_model({3 + i % 2, 4 + i % 3, 3}, 300 + i);
    const Matrix X = random_matrix(5, model.input_dim(), 400 + i);
    std::vector<int> y(5);
    for (int n = 0; n < 5; ++n) y[n] = (n + i) % 3;

    // full likelihood gradient
    const Vector grad = grad_loglik(model, X, y);
    Vector fd(grad.size());
    {
      ModelParams probe = model;
      for (Index p = 0; p < grad.size(); ++p) {
        const double h = 1e-6 * std::max(1.0, std::abs(model.theta[p]));
        probe.theta[p] = model.theta[p] + h;
        const double up = log_likelihood(probe, X, y);
        probe.theta[p] = model.theta[p] - h;
        const double dn = log_likelihood(probe, X, y);
        probe.theta[p] = model.theta[p];
        fd[p] = (up - dn) / (2.0 * h);
      }
    }
    worst = std::max(worst, (grad - fd).norm() / std::max(1.0, fd.norm()));

    // trailing-layer jacobian of the logits
    const Vector x = X.row(0).transpose();
    const Matrix J = jacobian_g(model, x, 2);
    {
      ModelParams probe = model;
      Matrix fdJ(J.rows(), J.cols());
      for (Index p = 0; p < J.rows(); ++p) {
        const double h = 1e-6 * std::max(1.0, std::abs(model.theta[p]));
        probe.theta[p] = model.theta[p] + h;
        const Vector up = forward(probe, x).logits();
        probe.theta[p] = model.theta[p] - h;
        const Vector dn = forward(probe, x).logits();
        probe.theta[p] = model.theta[p];
        fdJ.row(p) = ((up - dn) / (2.0 * h)).transpose();
      }
      worst = std::max(worst, (J - fdJ).norm() / std::max(1.0, fdJ.norm()));
    }

    // softmax jacobian
    const Vector z = random_vector(4, 500 + i, 2.0);
    const Matrix S = softmax_jacobian(softmax(z));
    Matrix fdS(4, 4);
    for (Index p = 0; p < 4; ++p) {
      Vector zp = z;
      const double h = 1e-6;
      zp[p] = z[p] + h;
      const Vector up = softmax(zp);
      zp[p] = z[p] - h;
      const Vector dn = softmax(zp);
      fdS.col(p) = (up - dn) / (2.0 * h);
    }
    worst = std::max(worst, (S - fdS).norm() / std::max(1.0, fdS.norm()));
  }
  const double elapsed = seconds_since(start);
  std::ostringstream os;
  os << "worst rel error " << worst << ", " << elapsed << " s";
  if (worst > 1e-5) throw std::runtime_error("finite differences: " + os.str());
  if (elapsed > 30.0) throw std::runtime_error("too slow: " + os.str());
  return os.str();
}

std::string criterion_logit_gradient_identity() {
  for (int i = 0; i < 50; ++i) {
    const ModelParams model = random_model({4, 5, 4}, 600 + i);
    const Vector x = random_vector(4, 700 + i);
    const int y = i % 4;
    const Vector f = softmax(forward(model, x).logits());
    const Vector assembled = logit_gradient(f, y);
    for (Index m = 0; m < 4; ++m) {
      const double expected = (m == y ? 1.0 : 0.0) - f[m];
      if (assembled[m] != expected) throw std::runtime_error("identity not exact");
    }
  }
  return "e_y - f reproduced exactly on 50 random cases";
}

std::string criterion_oracle_pmf() {
  const auto start = Clock::now();
  SyntheticSpec spec;
  Vector m0(2), m1(2), m2(2);
  m0 << 0.0, 0.0;
  m1 << 2.2, 0.0;
  m2 << 0.0, 2.2;
  spec.means = {m0, m1, m2};
  const Matrix shared = Matrix::Identity(2, 2) * 0.6;  // equal covariances keep the truth in-class
  spec.covariances = {shared, shared, shared};
  Vector priors(3);
  priors << 0.4, 0.35, 0.25;
  spec.priors = priors;
  spec.count = 5200;
  spec.seed = 99;
  const auto [all, oracle] = gen_synthetic(spec);

  Dataset train;
  train.inputs = all.inputs.topRows(5000);
  train.labels.assign(all.labels.begin(), all.labels.begin() + 5000);
  train.num_classes = 3;
  const Matrix probes = all.inputs.bottomRows(200);

  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.l2_weight = 1e-4;
  cfg.epochs = 200;
  cfg.batch_size = 256;
  cfg.seed = 3;
  const auto [model, report] = train_map(init_params(layer_chain({2, 3}), 3), train, cfg);

  const PosteriorCovariance post =
      direct_covariance(model, train.inputs, 1, cfg.l2_weight * 5000.0);

  double abs_dev = 0.0;
  for (Index i = 0; i < probes.rows(); ++i) {
    const Vector x = probes.row(i).transpose();
    const PmfEstimate est = mc_marginalize(delta_propagate(model, post, x), 10000, derive_seed(17, i));
    abs_dev += (est.pmf - oracle.posterior(x)).lpNorm<1>();
  }
  const double mad = abs_dev / (200.0 * 3.0);
  const double elapsed = seconds_since(start);
  std::ostringstream os;
  os << "mean abs deviation " << mad << " (train acc " << report.train_accuracy << "), " << elapsed
     << " s";
  if (mad > 0.03) throw std::runtime_error("oracle recovery: " + os.str());
  if (elapsed > 120.0) throw std::runtime_error("too slow: " + os.str());
  return os.str();
}

std::string criterion_mnist_training() {
  const auto start = Clock::now();
  load_mnist_once();
  MnistState& s = mnist();
  if (!s.loaded) throw std::runtime_error(s.message);

  const std::vector<Index> dims = {784, 300, 100, 40, 10};
  const Index n_r = trailing_param_count(layer_chain(dims), 2);
  if (n_r != 4450) throw std::runtime_error("trailing two layers have " + std::to_string(n_r) +
                                            " parameters, expected 4450");

  TrainConfig cfg;  // defaults: lr 1e-4, l2 1e-4, 3 epochs
  const auto [model, report] = train_map(init_params(layer_chain(dims), cfg.seed), s.train, cfg);
  s.model = model;
  s.test_accuracy = dataset_accuracy(model, s.test.inputs, s.test.labels);
  const double elapsed = seconds_since(start);

  std::ostringstream os;
  os << "test accuracy " << s.test_accuracy << ", n_r 4450, " << elapsed << " s";
  for (std::size_t e = 1; e < report.epoch_objective.size(); ++e)
    if (report.epoch_objective[e] > report.epoch_objective[e - 1])
      os << " (note: objective rose at epoch " << e + 1 << ")";
  if (s.test_accuracy < 0.88) throw std::runtime_error("accuracy: " + os.str());
  if (elapsed > 300.0) throw std::runtime_error("too slow: " + os.str());
  return os.str();
}

std::string criterion_mnist_calibration() {
  const auto start = Clock::now();
  MnistState& s = mnist();
  if (!s.loaded || s.model.theta.size() == 0)
    throw std::runtime_error("depends on the MNIST training criterion");

  // temperature scaling vs standard
  const double T = tune_temperature(s.model, s.val, default_temperature_grid());
  ReportSettings std_settings;
  std_settings.method = PredictionMethod::Standard;
  const double ece_standard = run_report(s.model, nullptr, s.val, std_settings).ece_inverse_count;
  ReportSettings t_settings;
  t_settings.method = PredictionMethod::TempScaled;
  t_settings.temperature = T;
  const double ece_temp = run_report(s.model, nullptr, s.val, t_settings).ece_inverse_count;
  if (ece_temp > ece_standard)
    throw std::runtime_error("ECE(T-scaled) " + std::to_string(ece_temp) + " > ECE(standard) " +
                             std::to_string(ece_standard));

  // posterior over the last two weight matrices, information-form assembly
  s.posterior = direct_covariance(s.model, s.train.inputs, 2,
                                  1e-4 * static_cast<double>(s.train.size()));
  s.has_posterior = true;

  const std::int64_t K = 1000;
  const std::uint64_t seed = 5;
  const double tc = tune_tc(s.model, s.posterior, s.val, default_tc_grid(), K, seed);
  ReportSettings prop;
  prop.method = PredictionMethod::Proposed;
  prop.mc_samples = K;
  prop.seed = seed;
  const double ece_tc1 = run_report(s.model, &s.posterior, s.val, prop).ece_inverse_count;
  prop.method = PredictionMethod::ProposedTc;
  prop.tc = tc;
  const double ece_tc = run_report(s.model, &s.posterior, s.val, prop).ece_inverse_count;
  if (ece_tc > ece_tc1)
    throw std::runtime_error("ECE(tc=" + std::to_string(tc) + ") " + std::to_string(ece_tc) +
                             " > ECE(tc=1) " + std::to_string(ece_tc1));

  std::ostringstream os;
  os << "ECE std " << ece_standard << " -> T=" << T << " " << ece_temp << "; ECE tc1 " << ece_tc1
     << " -> tc=" << tc << " " << ece_tc << ", " << seconds_since(start) << " s";
  return os.str();
}

std::string criterion_fusion_algebra() {
  // identical gaussians
  for (int C = 2; C <= 5; ++C) {
    const LogitGaussian lg{random_vector(4, 800 + C), random_spd(4, 810 + C)};
    const FusedLogit fused = fuse_classifiers(std::vector<LogitGaussian>(C, lg));
    if (rel_frobenius(fused.lg.cov, lg.cov / C) > 1e-12)
      throw std::runtime_error("P/C identity failed for C=" + std::to_string(C));
  }

  // block-diagonal same-class fusion == classifier fusion (orthogonal inputs)
  {
    const ModelParams model = make_model(layer_chain({4, 2}), Vector::Zero(10));
    PosteriorCovariance post;
    post.P = Matrix::Identity(10, 10);
    post.r = 1;
    post.prior_precision = 1.0;
    Vector x1 = Vector::Zero(4), x2 = Vector::Zero(4);
    x1[0] = 1.0;
    x2[0] = -1.0;
    const FusedLogit gls = fuse_same_class(model, post, {x1, x2});
    const FusedLogit pw = fuse_classifiers(
        {delta_propagate(model, post, x1), delta_propagate(model, post, x2)});
    if ((gls.lg.cov - pw.lg.cov).lpNorm<Eigen::Infinity>() > 1e-10 ||
        (gls.lg.mean - pw.lg.mean).lpNorm<Eigen::Infinity>() > 1e-10)
      throw std::runtime_error("block-diagonal GLS does not reduce to classifier fusion");
  }

  // information never decreases, 50 random cases
  for (int i = 0; i < 50; ++i) {
    std::vector<LogitGaussian> inputs;
    for (int c = 0; c < 2 + i % 3; ++c)
      inputs.push_back({random_vector(3, 900 + 10 * i + c), random_spd(3, 950 + 10 * i + c)});
    const FusedLogit fused = fuse_classifiers(inputs);
    for (const auto& in : inputs)
      if (min_eigenvalue(in.cov - fused.lg.cov) < -1e-10 * in.cov.trace())
        throw std::runtime_error("fused covariance not dominated at case " + std::to_string(i));
  }
  return "P/C, GLS reduction and PSD dominance all hold";
}

std::string criterion_risk() {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    Matrix samples(50, 3);
    for (Index k = 0; k < 50; ++k) {
      Vector z = random_vector(3, 1000 + 50 * i + k, 2.0);
      samples.row(k) = softmax(z).transpose();
    }
    const double gamma = unit(rng);
    const int m = static_cast<int>(rng() % 3);
    std::int64_t count = 0;
    for (Index k = 0; k < 50; ++k)
      if (samples(k, m) > gamma) ++count;
    if (risk_assess(samples, m, gamma) != static_cast<double>(count) / 50.0)
      throw std::runtime_error("risk does not match brute-force counting");

    if (risk_assess(samples, m, 0.0) != 1.0) throw std::runtime_error("risk(0) != 1");
    if (risk_assess(samples, m, 1.0) != 0.0) throw std::runtime_error("risk(1) != 0");
    double prev = 1.0;
    for (double g = 0.0; g <= 1.0; g += 0.1) {
      const double r = risk_assess(samples, m, g);
      if (r > prev) throw std::runtime_error("risk not monotone in the threshold");
      prev = r;
    }
  }
  return "exact counting, monotonicity and endpoints on 20 sample sets";
}

std::string criterion_simplex_invariants() {
  double worst_sum = 0.0, worst_ones = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Index M = 2 + i % 6;
    const LogitGaussian lg{random_vector(M, 1100 + i, 2.0), random_spd(M, 1200 + i)};
    const PmfEstimate est = mc_marginalize(lg, 500, static_cast<std::uint64_t>(i));
    worst_sum = std::max(worst_sum, std::abs(est.pmf.sum() - 1.0));
    const Vector ones = Vector::Ones(M);
    worst_ones = std::max(worst_ones, std::abs(ones.dot(est.cov * ones)));
  }
  std::ostringstream os;
  os << "max |sum-1| " << worst_sum << ", max |1'P1| " << worst_ones;
  if (worst_sum > 1e-12 || worst_ones > 1e-10) throw std::runtime_error("simplex: " + os.str());
  return os.str();
}

std::string criterion_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "duq_acceptance_determinism";
  fs::create_directories(dir);
  const auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };

  SyntheticSpec spec;
  spec.means = {Vector::Zero(3), Vector::Ones(3)};
  spec.covariances = {Matrix::Identity(3, 3), Matrix::Identity(3, 3)};
  spec.priors = Vector::Constant(2, 0.5);
  spec.count = 200;
  spec.seed = 21;
  const Dataset data = gen_synthetic(spec).first;

  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.seed = 8;

  for (int round = 0; round < 2; ++round) {
    const auto [model, report] = train_map(init_params(layer_chain({3, 4, 2}), cfg.seed), data, cfg);
    save_model((dir / ("model" + std::to_string(round) + ".duq")).string(), model);
    const PosteriorCovariance post = compute_posterior(model, data.inputs, 1, 0.02 * 200, CovMethod::Recursive, 8);
    save_posterior((dir / ("post" + std::to_string(round) + ".duq")).string(), post);

    PredictionSet set;
    set.mc_samples = 400;
    set.base_seed = 31;
    set.tc = post.tc;
    for (Index i = 0; i < 5; ++i) {
      set.gaussians.push_back(delta_propagate(model, post, data.inputs.row(i).transpose()));
      set.estimates.push_back(mc_marginalize(set.gaussians.back(), 400, derive_seed(31, i)));
    }
    save_prediction_set((dir / ("pred" + std::to_string(round) + ".duq")).string(), set);
  }
  if (slurp(dir / "model0.duq") != slurp(dir / "model1.duq"))
    throw std::runtime_error("model artifacts differ between identical runs");
  if (slurp(dir / "post0.duq") != slurp(dir / "post1.duq"))
    throw std::runtime_error("posterior artifacts differ between identical runs");
  if (slurp(dir / "pred0.duq") != slurp(dir / "pred1.duq"))
    throw std::runtime_error("prediction artifacts differ between identical runs");
  return "model, posterior and prediction artifacts byte-identical across reruns";
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "recursive covariance matches direct assembly", criterion_recursive_direct},
      {2, "gradients match finite differences", criterion_gradients},
      {3, "logit-space gradient identity is exact", criterion_logit_gradient_identity},
      {4, "marginalized PMF recovers the Bayes oracle", criterion_oracle_pmf},
      {5, "MNIST training reaches the accuracy floor", criterion_mnist_training},
      {6, "tuned scaling improves MNIST calibration", criterion_mnist_calibration},
      {7, "fusion algebra", criterion_fusion_algebra},
      {8, "risk estimator", criterion_risk},
      {9, "simplex and covariance invariants", criterion_simplex_invariants},
      {10, "pipeline determinism", criterion_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    try {
      const std::string detail = c.run();
      std::printf("criterion %2d PASS  %s — %s\n", c.id, c.name, detail.c_str());
    } catch (const std::exception& e) {
      ++failures;
      std::printf("criterion %2d FAIL  %s — %s\n", c.id, c.name, e.what());
    }
    std::fflush(stdout);
  }
  if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
