#pragma once

// Data ingestion: IDX image/label files (plain or gzip) and synthetic
// Gaussian-mixture sets with an exact Bayes-posterior oracle.

#include <zlib.h>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "duq/nn.hpp"

namespace duq {

struct Dataset {
  Matrix inputs;            // N x n_x
  std::vector<int> labels;  // zero-based class indices (1-based only at the I/O boundary)
  int num_classes = 0;
  std::string split;

  Index size() const { return inputs.rows(); }
};

namespace detail {

class IdxReader {
 public:
  explicit IdxReader(const std::string& path) : path_(path), file_(gzopen(path.c_str(), "rb")) {
    if (!file_) throw std::runtime_error("cannot open " + path);
  }
  ~IdxReader() {
    if (file_) gzclose(file_);
  }
  IdxReader(const IdxReader&) = delete;
  IdxReader& operator=(const IdxReader&) = delete;

  std::uint32_t read_u32_be() {
    unsigned char b[4];
    read_exact(b, 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
  }

  void read_exact(void* dst, std::size_t n) {
    const long off = offset_;
    const int got = gzread(file_, dst, static_cast<unsigned>(n));
    if (got < 0 || static_cast<std::size_t>(got) != n)
      throw std::runtime_error(path_ + ": truncated at byte " + std::to_string(off) + " (wanted " +
                               std::to_string(n) + " bytes, got " + std::to_string(got < 0 ? 0 : got) + ")");
    offset_ += static_cast<long>(n);
  }

  void expect_eof() {
    unsigned char b;
    if (gzread(file_, &b, 1) != 0)
      throw std::runtime_error(path_ + ": trailing bytes after declared payload (byte " +
                               std::to_string(offset_) + ")");
  }

  long offset() const { return offset_; }

 private:
  std::string path_;
  gzFile file_ = nullptr;
  long offset_ = 0;
};

}  // namespace detail

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Images flattened row-major, pixels scaled to [0,1] by /255.
inline Matrix load_idx_images(const std::string& path) {
  detail::IdxReader in(path);
  const std::uint32_t magic = in.read_u32_be();
  if (magic != kIdxImageMagic) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", magic);
    throw std::runtime_error(path + ": bad image magic " + buf + " at byte 0 (want 0x00000803)");
  }
  const std::uint32_t count = in.read_u32_be();
  const std::uint32_t rows = in.read_u32_be();
  const std::uint32_t cols = in.read_u32_be();
  const std::size_t pixels = std::size_t(rows) * cols;
  Matrix X(count, pixels);
  std::vector<unsigned char> row(pixels);
  for (std::uint32_t n = 0; n < count; ++n) {
    in.read_exact(row.data(), pixels);
    for (std::size_t p = 0; p < pixels; ++p) X(n, static_cast<Index>(p)) = row[p] / 255.0;
  }
  in.expect_eof();
  return X;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
  detail::IdxReader in(path);
  const std::uint32_t magic = in.read_u32_be();
  if (magic != kIdxLabelMagic) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", magic);
    throw std::runtime_error(path + ": bad label magic " + buf + " at byte 0 (want 0x00000801)");
  }
  const std::uint32_t count = in.read_u32_be();
  std::vector<unsigned char> raw(count);
  if (count > 0) in.read_exact(raw.data(), raw.size());
  in.expect_eof();
  return {raw.begin(), raw.end()};
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const std::string& split = "") {
  Dataset d;
  d.inputs = load_idx_images(images_path);
  d.labels = load_idx_labels(labels_path);
  d.split = split;
  if (d.inputs.rows() != static_cast<Index>(d.labels.size()))
    throw std::runtime_error("count mismatch: " + images_path + " has " + std::to_string(d.inputs.rows()) +
                             " images, " + labels_path + " has " + std::to_string(d.labels.size()) +
                             " labels");
  int max_label = 0;
  for (int y : d.labels) max_label = std::max(max_label, y);
  d.num_classes = max_label + 1;
  return d;
}

// Fixture/round-trip writers. Pixels are raw bytes; loading divides by 255.
inline void write_idx_images(const std::string& path, const std::vector<unsigned char>& pixels,
                             std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                             bool gzip_compress = false) {
  if (pixels.size() != std::size_t(count) * rows * cols)
    throw std::invalid_argument("write_idx_images: pixel buffer size mismatch");
  gzFile f = gzopen(path.c_str(), gzip_compress ? "wb" : "wbT");  // 'T' stores raw
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    gzwrite(f, b, 4);
  };
  put_u32(kIdxImageMagic);
  put_u32(count);
  put_u32(rows);
  put_u32(cols);
  if (!pixels.empty()) gzwrite(f, pixels.data(), static_cast<unsigned>(pixels.size()));
  gzclose(f);
}

inline void write_idx_labels(const std::string& path, const std::vector<int>& labels,
                             bool gzip_compress = false) {
  gzFile f = gzopen(path.c_str(), gzip_compress ? "wb" : "wbT");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    gzwrite(f, b, 4);
  };
  put_u32(kIdxLabelMagic);
  put_u32(static_cast<std::uint32_t>(labels.size()));
  for (int y : labels) {
    const unsigned char b = static_cast<unsigned char>(y);
    gzwrite(f, &b, 1);
  }
  gzclose(f);
}

// --- synthetic Gaussian mixtures ---

struct SyntheticSpec {
  std::vector<Vector> means;
  std::vector<Matrix> covariances;
  Vector priors;
  Index count = 0;
  std::uint64_t seed = 0;
};

// Exact class posterior of the generating mixture, used as ground truth for
// PMF-accuracy tests.
class MixtureOracle {
 public:
  MixtureOracle(std::vector<Vector> means, const std::vector<Matrix>& covariances, Vector priors)
      : means_(std::move(means)), log_priors_(priors.array().log()) {
    for (const auto& C : covariances) {
      Eigen::LLT<Matrix> llt(C);
      if (llt.info() != Eigen::Success)
        throw std::invalid_argument("synthetic component covariance is not positive definite");
      chol_.push_back(llt);
      log_norm_.push_back(-0.5 * C.rows() * std::log(2.0 * std::numbers::pi) -
                          Matrix(llt.matrixL()).diagonal().array().log().sum());
    }
  }

  Vector posterior(const Vector& x) const {
    const Index M = static_cast<Index>(means_.size());
    Vector logp(M);
    for (Index m = 0; m < M; ++m) {
      const Vector d = x - means_[static_cast<std::size_t>(m)];
      const Vector w = chol_[static_cast<std::size_t>(m)].matrixL().solve(d);
      logp[m] = log_priors_[m] + log_norm_[static_cast<std::size_t>(m)] - 0.5 * w.squaredNorm();
    }
    logp.array() -= log_sum_exp(logp);
    return logp.array().exp();
  }

  const Vector& mean(std::size_t m) const { return means_[m]; }

 private:
  std::vector<Vector> means_;
  Vector log_priors_;
  std::vector<Eigen::LLT<Matrix>> chol_;
  std::vector<double> log_norm_;
};

inline std::pair<Dataset, MixtureOracle> gen_synthetic(const SyntheticSpec& spec) {
  const std::size_t M = spec.means.size();
  if (M == 0 || spec.covariances.size() != M || static_cast<std::size_t>(spec.priors.size()) != M)
    throw std::invalid_argument("synthetic spec needs matching means/covariances/priors");
  if (std::abs(spec.priors.sum() - 1.0) > 1e-9 || spec.priors.minCoeff() < 0.0)
    throw std::invalid_argument("synthetic priors must be a probability vector");
  if (spec.count < 0) throw std::invalid_argument("synthetic count must be non-negative");

  MixtureOracle oracle(spec.means, spec.covariances, spec.priors);
  const Index dim = spec.means.front().size();

  std::vector<Matrix> factors;
  for (const auto& C : spec.covariances) factors.push_back(Eigen::LLT<Matrix>(C).matrixL());

  std::mt19937_64 rng(spec.seed);
  std::discrete_distribution<int> pick(spec.priors.data(), spec.priors.data() + spec.priors.size());
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset d;
  d.inputs.resize(spec.count, dim);
  d.labels.resize(static_cast<std::size_t>(spec.count));
  d.num_classes = static_cast<int>(M);
  d.split = "synthetic";
  for (Index n = 0; n < spec.count; ++n) {
    const int m = pick(rng);
    Vector z(dim);
    for (Index i = 0; i < dim; ++i) z[i] = normal(rng);
    d.inputs.row(n) = (spec.means[static_cast<std::size_t>(m)] + factors[static_cast<std::size_t>(m)] * z)
                          .transpose();
    d.labels[static_cast<std::size_t>(n)] = m;
  }
  return {std::move(d), std::move(oracle)};
}

}  // namespace duq
