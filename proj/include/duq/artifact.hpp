#pragma once

// DUQ1 artifact files: a human-readable text header (magic, kind, metadata,
// array directory, CRC32) followed by little-endian float64 payload arrays in
// header-declared order. Writes are atomic (temp file + rename) and round
// trips are bit-exact.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duq/nn.hpp"
#include "duq/posterior.hpp"
#include "duq/predict.hpp"

namespace duq {

constexpr const char* kArtifactMagic = "DUQ1";
constexpr int kArtifactFormat = 1;

namespace detail {

inline void append_f64_le(std::string& out, const double* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(data), count * sizeof(double));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      auto bits = std::bit_cast<std::uint64_t>(data[i]);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
}

inline double read_f64_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(p[b]);
  return std::bit_cast<double>(bits);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class ArtifactWriter {
 public:
  explicit ArtifactWriter(const std::string& kind) {
    header_ << kArtifactMagic << ' ' << kind << '\n';
    header_ << "format " << kArtifactFormat << '\n';
  }

  void field(const std::string& key, const std::string& value) { header_ << key << ' ' << value << '\n'; }
  void field(const std::string& key, std::int64_t value) { header_ << key << ' ' << value << '\n'; }
  void field(const std::string& key, std::uint64_t value) { header_ << key << ' ' << value << '\n'; }
  void field(const std::string& key, int value) { header_ << key << ' ' << value << '\n'; }
  void field(const std::string& key, double value) { header_ << key << ' ' << format_double(value) << '\n'; }

  void array(const std::string& name, const double* data, std::size_t count) {
    header_ << "array " << name << ' ' << count << '\n';
    append_f64_le(payload_, data, count);
  }

  void save(const std::string& path) {
    const auto crc =
        crc32(0L, reinterpret_cast<const Bytef*>(payload_.data()), static_cast<uInt>(payload_.size()));
    char crc_hex[16];
    std::snprintf(crc_hex, sizeof(crc_hex), "%08lx", static_cast<unsigned long>(crc));
    std::ostringstream full;
    full << header_.str() << "payload " << payload_.size() << '\n'
         << "crc32 " << crc_hex << '\n'
         << "---\n";
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
      const std::string head = full.str();
      out.write(head.data(), static_cast<std::streamsize>(head.size()));
      out.write(payload_.data(), static_cast<std::streamsize>(payload_.size()));
      if (!out) throw std::runtime_error("write to " + tmp + " failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw std::runtime_error("cannot move " + tmp + " into place");
  }

 private:
  std::ostringstream header_;
  std::string payload_;
};

class ArtifactReader {
 public:
  ArtifactReader(const std::string& path, const std::string& expected_kind) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    data_ = std::move(buf).str();

    std::size_t pos = 0;
    const std::string first = next_line(pos);
    if (first.rfind(std::string(kArtifactMagic) + ' ', 0) != 0)
      throw std::runtime_error(path + ": bad magic (want \"" + kArtifactMagic + "\")");
    kind_ = first.substr(std::string(kArtifactMagic).size() + 1);
    if (kind_ != expected_kind)
      throw std::runtime_error(path + ": expected kind " + expected_kind + ", file has " + kind_);

    std::size_t declared_payload = 0;
    std::string crc_hex;
    while (pos < data_.size()) {
      const std::string line = next_line(pos);
      if (line == "---") {
        payload_offset_ = pos;
        break;
      }
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "format") {
        int v = 0;
        ls >> v;
        if (v != kArtifactFormat)
          throw std::runtime_error(path + ": unsupported format version " + std::to_string(v));
      } else if (key == "array") {
        std::string name;
        std::size_t count = 0;
        ls >> name >> count;
        arrays_.emplace_back(name, count);
      } else {
        std::string rest;
        std::getline(ls, rest);
        if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
        fields_.emplace_back(key, rest);
      }
    }
    if (payload_offset_ == 0) throw std::runtime_error(path + ": missing header terminator");

    std::size_t total = 0;
    for (const auto& [name, count] : arrays_) total += count * sizeof(double);
    declared_payload = field_u64("payload");
    if (declared_payload != total)
      throw std::runtime_error(path + ": payload length " + std::to_string(declared_payload) +
                               " does not match declared arrays (" + std::to_string(total) + ")");
    if (data_.size() - payload_offset_ != declared_payload)
      throw std::runtime_error(path + ": file has " + std::to_string(data_.size() - payload_offset_) +
                               " payload bytes, header declares " + std::to_string(declared_payload));
    crc_hex = field_str("crc32");
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(data_.data() + payload_offset_),
                           static_cast<uInt>(declared_payload));
    char expect[16];
    std::snprintf(expect, sizeof(expect), "%08lx", static_cast<unsigned long>(crc));
    if (crc_hex != expect) throw std::runtime_error(path + ": payload checksum mismatch");
  }

  const std::string& kind() const { return kind_; }

  bool has_field(const std::string& key) const {
    for (const auto& [k, v] : fields_)
      if (k == key) return true;
    return false;
  }

  std::string field_str(const std::string& key) const {
    for (const auto& [k, v] : fields_)
      if (k == key) return v;
    throw std::runtime_error(path_ + ": missing header field '" + key + "'");
  }

  std::vector<std::string> field_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : fields_)
      if (k == key) out.push_back(v);
    return out;
  }

  std::int64_t field_i64(const std::string& key) const { return std::stoll(field_str(key)); }
  std::uint64_t field_u64(const std::string& key) const { return std::stoull(field_str(key)); }
  double field_f64(const std::string& key) const { return std::stod(field_str(key)); }

  // Arrays must be consumed in declared order.
  void read_array(const std::string& name, double* dst, std::size_t count) {
    if (next_array_ >= arrays_.size())
      throw std::runtime_error(path_ + ": no array left, wanted '" + name + "'");
    const auto& [got_name, got_count] = arrays_[next_array_];
    if (got_name != name || got_count != count)
      throw std::runtime_error(path_ + ": expected array " + name + "[" + std::to_string(count) +
                               "], found " + got_name + "[" + std::to_string(got_count) + "]");
    const char* src = data_.data() + payload_offset_ + consumed_bytes_;
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(dst, src, count * sizeof(double));
    } else {
      for (std::size_t i = 0; i < count; ++i) dst[i] = read_f64_le(src + i * sizeof(double));
    }
    consumed_bytes_ += count * sizeof(double);
    ++next_array_;
  }

 private:
  std::string next_line(std::size_t& pos) {
    const auto nl = data_.find('\n', pos);
    if (nl == std::string::npos) throw std::runtime_error(path_ + ": truncated header");
    std::string line = data_.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  }

  std::string path_;
  std::string data_;
  std::string kind_;
  std::vector<std::pair<std::string, std::string>> fields_;
  std::vector<std::pair<std::string, std::size_t>> arrays_;
  std::size_t payload_offset_ = 0;
  std::size_t consumed_bytes_ = 0;
  std::size_t next_array_ = 0;
};

}  // namespace detail

inline std::string peek_artifact_kind(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string first;
  std::getline(in, first);
  if (first.rfind(std::string(kArtifactMagic) + ' ', 0) != 0)
    throw std::runtime_error(path + ": bad magic (want \"" + kArtifactMagic + "\")");
  return first.substr(std::string(kArtifactMagic).size() + 1);
}

inline void save_model(const std::string& path, const ModelParams& model) {
  detail::ArtifactWriter w("model");
  w.field("layers", static_cast<std::int64_t>(model.layers.size()));
  for (const auto& s : model.layers) {
    std::ostringstream line;
    line << s.input_dim << ' ' << s.output_dim << ' '
         << (s.activation == Activation::Relu ? "relu" : "identity");
    w.field("layer", line.str());
  }
  w.array("theta", model.theta.data(), static_cast<std::size_t>(model.theta.size()));
  w.save(path);
}

inline ModelParams load_model(const std::string& path) {
  detail::ArtifactReader r(path, "model");
  const auto n_layers = r.field_i64("layers");
  std::vector<LayerSpec> layers;
  for (const auto& line : r.field_all("layer")) {
    std::istringstream ls(line);
    LayerSpec s;
    std::string act;
    ls >> s.input_dim >> s.output_dim >> act;
    if (act == "relu")
      s.activation = Activation::Relu;
    else if (act == "identity")
      s.activation = Activation::Identity;
    else
      throw std::runtime_error(path + ": unknown activation '" + act + "'");
    layers.push_back(s);
  }
  if (static_cast<std::int64_t>(layers.size()) != n_layers)
    throw std::runtime_error(path + ": layer count mismatch");
  validate_layers(layers);
  Vector theta(param_count(layers));
  r.read_array("theta", theta.data(), static_cast<std::size_t>(theta.size()));
  return ModelParams{std::move(layers), std::move(theta)};
}

inline void save_posterior(const std::string& path, const PosteriorCovariance& post) {
  detail::ArtifactWriter w("posterior");
  w.field("r", post.r);
  w.field("dim", static_cast<std::int64_t>(post.P.rows()));
  w.field("n_samples", post.n_samples);
  w.field("prior_precision", post.prior_precision);
  w.field("tc", post.tc);
  w.array("P", post.P.data(), static_cast<std::size_t>(post.P.size()));  // column-major
  w.save(path);
}

inline PosteriorCovariance load_posterior(const std::string& path) {
  detail::ArtifactReader r(path, "posterior");
  PosteriorCovariance post;
  post.r = static_cast<int>(r.field_i64("r"));
  const auto dim = r.field_i64("dim");
  post.n_samples = r.field_i64("n_samples");
  post.prior_precision = r.field_f64("prior_precision");
  post.tc = r.field_f64("tc");
  post.P.resize(dim, dim);
  r.read_array("P", post.P.data(), static_cast<std::size_t>(post.P.size()));
  return post;
}

// A batch of per-input predictions: the delta-method logit Gaussian plus the
// marginalized PMF estimate. Input i uses seed base_seed + i; the save path
// enforces that convention so files stay reproducible.
struct PredictionSet {
  std::vector<LogitGaussian> gaussians;
  std::vector<PmfEstimate> estimates;
  std::int64_t mc_samples = 0;
  std::uint64_t base_seed = 0;
  double tc = 1.0;
  std::vector<std::string> provenance;
};

inline void save_prediction_set(const std::string& path, const PredictionSet& set) {
  if (set.gaussians.size() != set.estimates.size())
    throw std::invalid_argument("prediction set: gaussian/estimate count mismatch");
  if (set.gaussians.empty()) throw std::invalid_argument("prediction set is empty");
  const Index M = set.gaussians.front().mean.size();
  const auto n = static_cast<Index>(set.gaussians.size());
  for (Index i = 0; i < n; ++i) {
    const auto& est = set.estimates[static_cast<std::size_t>(i)];
    if (est.samples != set.mc_samples || est.seed != set.base_seed + static_cast<std::uint64_t>(i))
      throw std::invalid_argument("prediction set: estimate " + std::to_string(i) +
                                  " does not follow the base_seed + index convention");
  }

  Matrix g_mean(M, n), pmf(M, n);
  Matrix g_cov(M * M, n), pmf_cov(M * M, n);
  for (Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    g_mean.col(i) = set.gaussians[ui].mean;
    pmf.col(i) = set.estimates[ui].pmf;
    g_cov.col(i) = Eigen::Map<const Vector>(set.gaussians[ui].cov.data(), M * M);
    pmf_cov.col(i) = Eigen::Map<const Vector>(set.estimates[ui].cov.data(), M * M);
  }

  detail::ArtifactWriter w("prediction");
  w.field("count", static_cast<std::int64_t>(n));
  w.field("classes", static_cast<std::int64_t>(M));
  w.field("mc_samples", set.mc_samples);
  w.field("seed", set.base_seed);
  w.field("tc", set.tc);
  for (const auto& p : set.provenance) w.field("provenance", p);
  w.array("g_mean", g_mean.data(), static_cast<std::size_t>(g_mean.size()));
  w.array("g_cov", g_cov.data(), static_cast<std::size_t>(g_cov.size()));
  w.array("pmf", pmf.data(), static_cast<std::size_t>(pmf.size()));
  w.array("pmf_cov", pmf_cov.data(), static_cast<std::size_t>(pmf_cov.size()));
  w.save(path);
}

inline PredictionSet load_prediction_set(const std::string& path) {
  detail::ArtifactReader r(path, "prediction");
  const Index n = r.field_i64("count");
  const Index M = r.field_i64("classes");
  PredictionSet set;
  set.mc_samples = r.field_i64("mc_samples");
  set.base_seed = r.field_u64("seed");
  set.tc = r.field_f64("tc");
  set.provenance = r.field_all("provenance");

  Matrix g_mean(M, n), pmf(M, n), g_cov(M * M, n), pmf_cov(M * M, n);
  r.read_array("g_mean", g_mean.data(), static_cast<std::size_t>(g_mean.size()));
  r.read_array("g_cov", g_cov.data(), static_cast<std::size_t>(g_cov.size()));
  r.read_array("pmf", pmf.data(), static_cast<std::size_t>(pmf.size()));
  r.read_array("pmf_cov", pmf_cov.data(), static_cast<std::size_t>(pmf_cov.size()));

  set.gaussians.resize(static_cast<std::size_t>(n));
  set.estimates.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    set.gaussians[ui].mean = g_mean.col(i);
    set.gaussians[ui].cov = Eigen::Map<const Matrix>(g_cov.col(i).data(), M, M);
    set.estimates[ui].pmf = pmf.col(i);
    set.estimates[ui].cov = Eigen::Map<const Matrix>(pmf_cov.col(i).data(), M, M);
    set.estimates[ui].samples = set.mc_samples;
    set.estimates[ui].seed = set.base_seed + static_cast<std::uint64_t>(i);
  }
  return set;
}

}  // namespace duq
