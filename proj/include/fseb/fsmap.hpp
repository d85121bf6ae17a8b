#pragma once

// Toy-scale function-space MAP with the Jacobian volume correction
//
//   log p(y | f(x_hat; theta)) + log p(theta) - 1/2 log det(J^T J),
//
// where J is the (M K) x P Jacobian of the outputs at the evaluation points.
// Only tractable for small P; the correction gradient is taken by central
// differences.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fseb/autodiff.hpp"
#include "fseb/data.hpp"
#include "fseb/model.hpp"

namespace fseb::fsmap {

inline constexpr std::size_t kMaxParams = 500;
inline constexpr double kLogDetJitter = 1e-10;

/// Ordered parameter tensors; Jacobian columns follow this order, row-major
/// within each tensor.
struct NamedParams {
  std::vector<std::string> names;
  std::vector<Tensor> values;

  static NamedParams from(const ModelParams& params);
  std::size_t count() const;
};

/// Maps a B x D input to B x K outputs given bound leaves (in NamedParams order).
using OutputFn = std::function<ad::Var(const ad::Var& x, std::span<const ad::Var> leaves)>;

OutputFn mlp_output_fn(const MlpConfig& config);

struct JacobianBlock {
  Tensor matrix;       // (M K) x P, row m * K + k
  Tensor eval_points;  // M x D
  std::size_t param_count = 0;
};

JacobianBlock dense_jacobian(const OutputFn& fn, const NamedParams& params, const Tensor& x_hat);
JacobianBlock dense_jacobian(const ModelParams& params, const Tensor& x_hat);

struct LogDetCorrection {
  double value = 0.0;  // -1/2 log det(J^T J [+ jitter I])
  bool jitter_used = false;
};

/// From the singular values s_i of J: -sum log s_i, or
/// -1/2 sum log(s_i^2 + 1e-10) when some s_i^2 falls below 1e-10.
/// Requires rows >= columns.
LogDetCorrection log_det_correction(const Tensor& jacobian);
LogDetCorrection log_det_correction(const JacobianBlock& jac);

struct FsMapLoss {
  double value = 0.0;
  double cross_entropy = 0.0;
  double param_penalty = 0.0;
  double correction = 0.0;  // log_det_correction value; enters the loss negated
  bool jitter_used = false;
  ad::Gradients grads;
};

/// Minimization form: sum CE + (tau_theta / 2) |theta|^2 - correction.
/// The correction gradient comes from central differences with `fd_step`.
FsMapLoss fs_map_loss(const Batch& batch, const OutputFn& fn, const NamedParams& params, const Tensor& x_hat,
                      double tau_theta, bool with_correction = true, double fd_step = 1e-5);
FsMapLoss fs_map_loss(const Batch& batch, const ModelParams& params, const Tensor& x_hat, double tau_theta,
                      bool with_correction = true, double fd_step = 1e-5);

/// Finite-difference gradient of the correction alone, keyed by name.
ad::Gradients correction_gradient(const OutputFn& fn, const NamedParams& params, const Tensor& x_hat,
                                  double fd_step = 1e-5);

}  // namespace fseb::fsmap
