#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace duq;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  const fs::path dir = fs::temp_directory_path() / "duq_data_tests";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("idx image parsing scales pixels to [0,1]", "[data]") {
  const auto path = (test_dir() / "tiny-images.idx").string();
  write_idx_images(path, {0, 255, 128, 0}, 1, 2, 2);
  const Matrix X = load_idx_images(path);
  REQUIRE(X.rows() == 1);
  REQUIRE(X.cols() == 4);
  CHECK(X(0, 0) == 0.0);
  CHECK(X(0, 1) == 1.0);
  CHECK(X(0, 2) == 128.0 / 255.0);
  CHECK(X(0, 3) == 0.0);
}

TEST_CASE("idx loading works through gzip", "[data]") {
  const auto plain = (test_dir() / "gz-images.idx").string();
  const auto gz = (test_dir() / "gz-images.idx.gz").string();
  const std::vector<unsigned char> pixels = {10, 20, 30, 40, 50, 60};
  write_idx_images(plain, pixels, 3, 1, 2);
  write_idx_images(gz, pixels, 3, 1, 2, /*gzip=*/true);
  const Matrix a = load_idx_images(plain);
  const Matrix b = load_idx_images(gz);
  CHECK((a - b).norm() == 0.0);
}

TEST_CASE("idx count mismatch is reported", "[data]") {
  const auto images = (test_dir() / "mm-images.idx").string();
  const auto labels = (test_dir() / "mm-labels.idx").string();
  write_idx_images(images, std::vector<unsigned char>(10 * 4, 0), 10, 2, 2);
  write_idx_labels(labels, std::vector<int>(9, 1));
  CHECK_THROWS_WITH(load_idx(images, labels), Catch::Matchers::ContainsSubstring("count mismatch"));
}

TEST_CASE("idx bad magic is reported with the offset", "[data]") {
  const auto path = (test_dir() / "bad-magic.idx").string();
  {
    std::ofstream out(path, std::ios::binary);
    const unsigned char bytes[8] = {0, 0, 9, 9, 0, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
  CHECK_THROWS_WITH(load_idx_images(path), Catch::Matchers::ContainsSubstring("bad image magic") &&
                                               Catch::Matchers::ContainsSubstring("byte 0"));
  CHECK_THROWS_WITH(load_idx_labels(path), Catch::Matchers::ContainsSubstring("bad label magic"));
}

TEST_CASE("idx truncation is reported with a byte offset", "[data]") {
  const auto full = (test_dir() / "trunc-src.idx").string();
  const auto cut = (test_dir() / "trunc.idx").string();
  write_idx_images(full, std::vector<unsigned char>(5 * 9, 7), 5, 3, 3);
  {
    std::ifstream in(full, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 20));
  }
  CHECK_THROWS_WITH(load_idx_images(cut), Catch::Matchers::ContainsSubstring("truncated at byte"));
}

TEST_CASE("idx write/load round-trips generated fixtures", "[data]") {
  const auto images = (test_dir() / "rt-images.idx").string();
  const auto labels = (test_dir() / "rt-labels.idx").string();
  std::mt19937_64 rng(99);
  std::vector<unsigned char> pixels(20 * 6);
  for (auto& p : pixels) p = static_cast<unsigned char>(rng() % 256);
  std::vector<int> y(20);
  for (auto& v : y) v = static_cast<int>(rng() % 4);
  write_idx_images(images, pixels, 20, 2, 3);
  write_idx_labels(labels, y);

  const Dataset d = load_idx(images, labels, "train");
  REQUIRE(d.size() == 20);
  REQUIRE(d.inputs.cols() == 6);
  CHECK(d.labels == y);
  CHECK(d.num_classes == 4);
  CHECK(d.split == "train");
  for (std::size_t i = 0; i < pixels.size(); ++i)
    CHECK(d.inputs(static_cast<Index>(i) / 6, static_cast<Index>(i) % 6) == pixels[i] / 255.0);
}

TEST_CASE("synthetic oracle is symmetric between mirrored classes", "[data]") {
  SyntheticSpec spec;
  Vector m0(2), m1(2);
  m0 << -1.0, 0.0;
  m1 << 1.0, 0.0;
  spec.means = {m0, m1};
  spec.covariances = {Matrix::Identity(2, 2), Matrix::Identity(2, 2)};
  spec.priors = Vector::Constant(2, 0.5);
  spec.count = 10;
  spec.seed = 5;
  const auto [data, oracle] = gen_synthetic(spec);
  Vector probe(2);
  probe << 0.0, 3.0;  // on the symmetry axis
  const Vector post = oracle.posterior(probe);
  CHECK(post[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(post[1] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("synthetic oracle with indistinguishable classes returns the priors", "[data]") {
  SyntheticSpec spec;
  spec.means = {Vector::Zero(2), Vector::Zero(2)};
  spec.covariances = {Matrix::Identity(2, 2) * 2.0, Matrix::Identity(2, 2) * 2.0};
  Vector priors(2);
  priors << 0.3, 0.7;
  spec.priors = priors;
  spec.count = 1;
  const auto [data, oracle] = gen_synthetic(spec);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Vector post = oracle.posterior(testsupport::random_vector(2, 300 + s, 2.0));
    CHECK(post[0] == Catch::Approx(0.3).margin(1e-12));
    CHECK(post[1] == Catch::Approx(0.7).margin(1e-12));
  }
}

TEST_CASE("synthetic oracle matches a direct Bayes computation", "[data]") {
  SyntheticSpec spec;
  Vector m0(2), m1(2), m2(2);
  m0 << 0.0, 0.0;
  m1 << 2.0, 0.5;
  m2 << -1.0, 1.5;
  Matrix c0 = Matrix::Identity(2, 2) * 0.8;
  Matrix c1(2, 2), c2(2, 2);
  c1 << 1.0, 0.3, 0.3, 0.5;
  c2 << 0.6, -0.2, -0.2, 0.9;
  spec.means = {m0, m1, m2};
  spec.covariances = {c0, c1, c2};
  Vector priors(3);
  priors << 0.5, 0.2, 0.3;
  spec.priors = priors;
  spec.count = 1;
  const auto [data, oracle] = gen_synthetic(spec);

  const auto density = [](const Vector& x, const Vector& mu, const Matrix& C) {
    const double det = C(0, 0) * C(1, 1) - C(0, 1) * C(1, 0);
    const Vector d = x - mu;
    // inverse of a 2x2 written out by hand
    const double quad =
        (C(1, 1) * d[0] * d[0] - 2.0 * C(0, 1) * d[0] * d[1] + C(0, 0) * d[1] * d[1]) / det;
    return std::exp(-0.5 * quad) / (2.0 * std::numbers::pi * std::sqrt(det));
  };

  for (std::uint64_t s = 0; s < 5; ++s) {
    const Vector x = testsupport::random_vector(2, 700 + s, 1.5);
    Vector expected(3);
    expected[0] = priors[0] * density(x, m0, c0);
    expected[1] = priors[1] * density(x, m1, c1);
    expected[2] = priors[2] * density(x, m2, c2);
    expected /= expected.sum();
    CHECK((oracle.posterior(x) - expected).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("synthetic generation is deterministic and label-consistent", "[data]") {
  SyntheticSpec spec;
  spec.means = {Vector::Zero(3), Vector::Ones(3)};
  spec.covariances = {Matrix::Identity(3, 3), Matrix::Identity(3, 3)};
  spec.priors = Vector::Constant(2, 0.5);
  spec.count = 50;
  spec.seed = 17;
  const auto [a, oa] = gen_synthetic(spec);
  const auto [b, ob] = gen_synthetic(spec);
  CHECK((a.inputs - b.inputs).norm() == 0.0);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 50);
  for (int y : a.labels) CHECK((y == 0 || y == 1));
}

TEST_CASE("synthetic spec validation", "[data]") {
  SyntheticSpec spec;
  spec.means = {Vector::Zero(2)};
  Matrix bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;  // indefinite
  spec.covariances = {bad};
  spec.priors = Vector::Constant(1, 1.0);
  spec.count = 1;
  CHECK_THROWS_AS(gen_synthetic(spec), std::invalid_argument);

  spec.covariances = {Matrix::Identity(2, 2)};
  spec.priors = Vector::Constant(1, 0.5);  // does not sum to one
  CHECK_THROWS_AS(gen_synthetic(spec), std::invalid_argument);
}
