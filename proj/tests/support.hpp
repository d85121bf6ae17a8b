#pragma once

// Shared helpers for the unit tests: random inputs and straight-line oracles
// that do not go through the library code they check.

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "fseb/model.hpp"
#include "fseb/tensor.hpp"

namespace fseb::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(shape);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline MlpConfig tiny_config(std::vector<std::size_t> hidden = {8, 4}, std::size_t in = 2, std::size_t out = 2,
                             Activation act = Activation::kTanh, std::uint64_t seed = 0) {
  MlpConfig c;
  c.input_dim = in;
  c.hidden_widths = std::move(hidden);
  c.output_dim = out;
  c.activation = act;
  c.init = default_init(act);
  c.seed = seed;
  return c;
}

/// init_params plus nonzero biases, so every parameter block is exercised.
inline ModelParams random_params(const MlpConfig& config, std::uint64_t seed) {
  MlpConfig c = config;
  c.seed = seed;
  ModelParams p = init_params(c);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (auto& b : p.biases) b = random_tensor(b.shape(), rng, 0.3);
  return p;
}

/// Plain-loop forward pass: features then head.
inline Tensor oracle_features(const Tensor& x, const ModelParams& p) {
  const std::size_t n = x.shape()[0];
  std::vector<std::vector<double>> h(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < x.shape()[1]; ++j) h[i].push_back(x(i, j));
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const Tensor& w = p.weights[l];
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> next(w.shape()[1]);
      for (std::size_t o = 0; o < w.shape()[1]; ++o) {
        double z = p.biases[l][o];
        for (std::size_t k = 0; k < w.shape()[0]; ++k) z += h[i][k] * w(k, o);
        next[o] = p.config.activation == Activation::kTanh ? std::tanh(z) : std::max(0.0, z);
      }
      h[i] = std::move(next);
    }
  }
  const std::size_t d = p.config.hidden_widths.back();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = h[i][j];
  return out;
}

inline Tensor oracle_logits(const Tensor& x, const ModelParams& p) {
  const Tensor h = oracle_features(x, p);
  const std::size_t n = h.shape()[0], d = h.shape()[1], k = p.head.shape()[1];
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += h(i, j) * p.head(j, c);
      out(i, c) = s;
    }
  return out;
}

/// Gauss-Jordan inverse with partial pivoting.
inline Tensor oracle_inverse(const Tensor& a) {
  const std::size_t n = a.shape()[0];
  std::vector<std::vector<double>> m(n, std::vector<double>(2 * n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a(i, j);
    m[i][n + i] = 1.0;
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    std::swap(m[c], m[piv]);
    const double d = m[c][c];
    for (auto& v : m[c]) v /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = m[r][c];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < 2 * n; ++j) m[r][j] -= f * m[c][j];
    }
  }
  Tensor inv({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) inv(i, j) = m[i][n + j];
  return inv;
}

/// log|det A| by LU with partial pivoting.
inline double oracle_log_abs_det(const Tensor& a) {
  const std::size_t n = a.shape()[0];
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a(i, j);
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    std::swap(m[c], m[piv]);
    acc += std::log(std::abs(m[c][c]));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (std::size_t j = c; j < n; ++j) m[r][j] -= f * m[c][j];
    }
  }
  return acc;
}

/// v^T A^{-1} v using the explicit inverse.
inline double oracle_quad(const Tensor& a, const std::vector<double>& v) {
  const Tensor inv = oracle_inverse(a);
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) s += v[i] * inv(i, j) * v[j];
  return s;
}

inline Tensor oracle_gram_plus_identity(const Tensor& h) {
  const std::size_t m = h.shape()[0], d = h.shape()[1];
  Tensor k({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = i == j ? 1.0 : 0.0;
      for (std::size_t c = 0; c < d; ++c) s += h(i, c) * h(j, c);
      k(i, j) = s;
    }
  return k;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace fseb::testing
