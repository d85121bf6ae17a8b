#include "fseb/linalg.hpp"

#include <cmath>
#include <vector>

namespace fseb::linalg {

namespace {

void require_square(const Tensor& a, const char* what) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " +
                     shape_string(a.shape()));
  }
}

}  // namespace

std::optional<Tensor> try_cholesky(const Tensor& a) {
  require_square(a, "cholesky");
  const std::size_t n = a.rows();
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Tensor cholesky(const Tensor& a) {
  auto l = try_cholesky(a);
  if (!l) throw NotPositiveDefinite("cholesky: matrix is not positive definite");
  return std::move(*l);
}

void solve_lower(const Tensor& lower, std::span<double> b) {
  const std::size_t n = lower.rows();
  if (b.size() != n) {
    throw ShapeError("solve_lower: factor " + shape_string(lower.shape()) + " vs rhs length " +
                     std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower(i, k) * b[k];
    b[i] = s / lower(i, i);
  }
}

void solve_lower_transposed(const Tensor& lower, std::span<double> b) {
  const std::size_t n = lower.rows();
  if (b.size() != n) {
    throw ShapeError("solve_lower_transposed: factor " + shape_string(lower.shape()) +
                     " vs rhs length " + std::to_string(b.size()));
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= lower(k, ii) * b[k];
    b[ii] = s / lower(ii, ii);
  }
}

void cholesky_solve(const Tensor& lower, std::span<double> b) {
  solve_lower(lower, b);
  solve_lower_transposed(lower, b);
}

double cholesky_quad_form(const Tensor& lower, std::span<const double> v) {
  std::vector<double> w(v.begin(), v.end());
  solve_lower(lower, w);
  double s = 0.0;
  for (double x : w) s += x * x;
  return s;
}

Tensor gram_plus_identity(const Tensor& h) {
  if (h.rank() != 2) throw ShapeError("gram_plus_identity: expected a matrix, got " + shape_string(h.shape()));
  Tensor k = matmul_transposed_rhs(h, h);
  for (std::size_t i = 0; i < k.rows(); ++i) k(i, i) += 1.0;
  return k;
}

double frobenius_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("frobenius_distance: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace fseb::linalg
