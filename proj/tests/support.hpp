#pragma once

// Shared test helpers: independent finite-difference oracles and random
// instance generators. Everything here stays off the implementation paths it
// is used to check.

#include <duq/duq.hpp>

#include <functional>
#include <random>
#include <vector>

namespace testsupport {

using duq::Index;
using duq::Matrix;
using duq::Vector;

// Central finite differences of a scalar function of theta.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& theta,
                          double base_step = 1e-6) {
  Vector grad(theta.size());
  Vector t = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    const double h = base_step * std::max(1.0, std::abs(theta[i]));
    const double orig = t[i];
    t[i] = orig + h;
    const double fp = f(t);
    t[i] = orig - h;
    const double fm = f(t);
    t[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Central finite differences of a vector-valued function; column j is df/dx_j.
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x,
                          double base_step = 1e-6) {
  const Vector f0 = f(x);
  Matrix jac(f0.size(), x.size());
  Vector t = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double h = base_step * std::max(1.0, std::abs(x[i]));
    const double orig = t[i];
    t[i] = orig + h;
    const Vector fp = f(t);
    t[i] = orig - h;
    const Vector fm = f(t);
    t[i] = orig;
    jac.col(i) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

inline double rel_frobenius(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

inline std::vector<duq::LayerSpec> layer_chain(const std::vector<Index>& dims) {
  std::vector<duq::LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers.push_back({dims[i], dims[i + 1],
                      i + 2 == dims.size() ? duq::Activation::Identity : duq::Activation::Relu});
  return layers;
}

// Random model with non-trivial biases (init_params zeroes them).
inline duq::ModelParams random_model(const std::vector<Index>& dims, std::uint64_t seed) {
  duq::ModelParams model = duq::init_params(layer_chain(dims), seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (Index i = 0; i < model.theta.size(); ++i) model.theta[i] += noise(rng);
  return model;
}

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = n(rng);
  return m;
}

inline Vector random_vector(Index size, std::uint64_t seed, double scale = 1.0) {
  return random_matrix(size, 1, seed, scale).col(0);
}

// Random symmetric PSD matrix with eigenvalues bounded away from zero.
inline Matrix random_spd(Index n, std::uint64_t seed, double floor = 0.1) {
  const Matrix a = random_matrix(n, n, seed);
  Matrix m = a * a.transpose() / static_cast<double>(n);
  m.diagonal().array() += floor;
  return m;
}

inline Vector random_pmf(Index m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Vector p(m);
  for (Index i = 0; i < m; ++i) p[i] = u(rng);
  return p / p.sum();
}

}  // namespace testsupport
