#pragma once

// Empirical-Bayes function-space prior.
//
// The kernel over M context points is K = H H^T + I, where H holds the
// features of the context points under the frozen snapshot phi0. The
// regularizer
//
//   J(theta, x_hat) = -sum_k (tau_f / 2) f_k^T K^{-1} f_k - (tau_theta / 2) |theta|^2
//
// penalizes each output column f_k of f(x_hat; theta) by its squared
// Mahalanobis distance from zero under K, plus ordinary weight decay over all
// of theta. K depends only on phi0, so it is a constant on the tape.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "fseb/autodiff.hpp"
#include "fseb/model.hpp"

namespace fseb {

struct ContextDistribution;

struct ContextKernel {
  std::size_t m = 0;
  Tensor matrix;
  std::shared_ptr<const Tensor> chol;
  double jitter_added = 0.0;
};

struct PriorConfig {
  double tau_f = 1.0;
  double tau_theta = 0.0;
  std::size_t context_batch_size = 32;
  std::size_t mc_context_samples = 1;  // I
  std::size_t mc_param_samples = 1;    // J
  double sigma = 0.0;

  /// tau_f = 0 is accepted so the weight-decay limit can be evaluated exactly.
  void validate() const;
};

/// Jitter ladder: 1e-10 * 2^k for k = 0..20, used only if the plain
/// factorization of H H^T + I fails.
ContextKernel build_kernel(const Tensor& h);

/// v^T K^{-1} v via two triangular solves against the kernel factor.
double mahalanobis_sq(std::span<const double> v, const ContextKernel& kernel);
/// Tape version; an M x K operand is summed over its columns.
ad::Var mahalanobis_sq(const ad::Var& v, const ContextKernel& kernel);

/// The two penalty terms of -J, recorded on a tape.
struct RegularizerTerms {
  ad::Var function_term;  // (tau_f / 2) sum_k d^2_M(f_k, K)
  ad::Var param_term;     // (tau_theta / 2) |theta|^2
  ad::Var value;          // J = -(function_term + param_term)
};

RegularizerTerms eb_regularizer(const BoundParams& theta, const Tensor& x_hat, const FeatureSnapshot& phi0,
                                const PriorConfig& cfg);
/// Same regularizer with a prebuilt kernel for x_hat.
RegularizerTerms eb_regularizer(const BoundParams& theta, const Tensor& x_hat, const ContextKernel& kernel,
                                const PriorConfig& cfg);

double eb_regularizer(const ModelParams& theta, const Tensor& x_hat, const FeatureSnapshot& phi0,
                      const PriorConfig& cfg);

/// Monte-Carlo KL term
///
///   F(theta) = -(1 / IJ) sum_i sum_j J(theta + sigma eps_j, X_i)
///
/// with the theta-independent constant dropped. The value is exposed as
/// mean_j/mean_i of the penalty terms so callers can report components.
struct KlEstimate {
  ad::Var function_term;  // mean over (i, j) of the function-space term
  ad::Var param_term;     // mean over (i, j) of the parameter term
  ad::Var value;          // F = function_term + param_term
};

/// Uses the supplied context batches as X_1..X_I; eps_j are seeded by
/// `seed`. With sigma = 0 and one batch, F = -J exactly.
KlEstimate mc_kl_estimate(const BoundParams& theta, std::span<const Tensor> context_batches,
                          const FeatureSnapshot& phi0, const PriorConfig& cfg, std::uint64_t seed);
/// Draws I batches of size cfg.context_batch_size from the distribution.
KlEstimate mc_kl_estimate(const BoundParams& theta, const ContextDistribution& dist,
                          const FeatureSnapshot& phi0, const PriorConfig& cfg, std::uint64_t seed);

double mc_kl_estimate(const ModelParams& theta, const ContextDistribution& dist, const FeatureSnapshot& phi0,
                      const PriorConfig& cfg, std::uint64_t seed);

/// Context batches for one MC estimate: batch i is drawn with
/// derive_seed(seed, kContext, i).
std::vector<Tensor> draw_context_batches(const ContextDistribution& dist, std::size_t count,
                                         std::size_t batch_size, std::uint64_t seed);

}  // namespace fseb
