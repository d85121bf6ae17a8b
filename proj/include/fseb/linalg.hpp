#pragma once

#include <optional>
#include <span>
#include <stdexcept>

#include "fseb/tensor.hpp"

namespace fseb::linalg {

class NotPositiveDefinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lower-triangular L with A = L L^T, or nullopt if a non-positive pivot
/// (or a NaN) is met.
std::optional<Tensor> try_cholesky(const Tensor& a);

/// Throws NotPositiveDefinite on failure.
Tensor cholesky(const Tensor& a);

/// In-place forward substitution: b <- L^{-1} b.
void solve_lower(const Tensor& lower, std::span<double> b);

/// In-place back substitution with the transpose: b <- L^{-T} b.
void solve_lower_transposed(const Tensor& lower, std::span<double> b);

/// b <- (L L^T)^{-1} b via the two triangular solves.
void cholesky_solve(const Tensor& lower, std::span<double> b);

/// Sum of squares of L^{-1} v, i.e. v^T (L L^T)^{-1} v.
double cholesky_quad_form(const Tensor& lower, std::span<const double> v);

/// H H^T + I.
Tensor gram_plus_identity(const Tensor& h);

double frobenius_distance(const Tensor& a, const Tensor& b);

}  // namespace fseb::linalg
