#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fseb/autodiff.hpp"
#include "fseb/data.hpp"
#include "fseb/function_prior.hpp"
#include "fseb/model.hpp"

namespace fseb {

enum class ObjectiveKind { kPsMap, kEbMap, kEbVi };
const char* to_string(ObjectiveKind k);
ObjectiveKind parse_objective(const std::string& s);

/// How the data term is scaled against the once-per-step regularizer.
/// per-step: (N_train / B) * sum of batch cross-entropies, so a step is an
///   unbiased estimate of the full-data objective.
/// per-datum: batch mean cross-entropy, i.e. the regularizer carries N_train
///   times more relative weight.
enum class RegularizerScaling { kPerStep, kPerDatum };
const char* to_string(RegularizerScaling s);
RegularizerScaling parse_regularizer_scaling(const std::string& s);

struct TrainConfig {
  ObjectiveKind objective = ObjectiveKind::kEbVi;
  double lr = 1e-3;
  double momentum = 0.9;
  double cosine_alpha = 0.0;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::size_t likelihood_mc_samples = 1;  // S
  PriorConfig prior;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;  // 0: use the dataset size
  RegularizerScaling regularizer_scaling = RegularizerScaling::kPerStep;
  /// Re-snapshot phi0 from the live feature layers every this many epochs
  /// (provenance current-train-snapshot); 0 keeps phi0 fixed.
  std::size_t phi0_refresh_epochs = 0;

  void validate() const;
};

struct LossBreakdown {
  double data_nll = 0.0;
  double function_penalty = 0.0;
  double param_penalty = 0.0;
  double total = 0.0;
};

/// Minimization objective recorded on a tape, split into its components.
struct ObjectiveTerms {
  ad::Var data;
  ad::Var function_penalty;  // invalid for ps-map
  ad::Var param_penalty;
  ad::Var total;

  LossBreakdown breakdown() const;
};

/// Scaled cross-entropy: scale * sum_n -log softmax(logits)[n, y_n].
ad::Var cross_entropy(const ad::Var& logits, const std::vector<std::size_t>& labels, double scale);

ObjectiveTerms ps_map_objective(const BoundParams& theta, const Batch& batch, double tau_theta,
                                std::size_t n_train, RegularizerScaling scaling = RegularizerScaling::kPerStep);
ObjectiveTerms eb_map_objective(const BoundParams& theta, const Batch& batch, const Tensor& x_hat,
                                const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t n_train,
                                RegularizerScaling scaling = RegularizerScaling::kPerStep);
/// Context batches are X_1..X_I; the S likelihood perturbations and the J
/// prior perturbations are seeded from `seed`.
ObjectiveTerms eb_vi_objective(const BoundParams& theta, const Batch& batch,
                               std::span<const Tensor> context_batches, const FeatureSnapshot& phi0,
                               const PriorConfig& cfg, std::size_t likelihood_samples, std::size_t n_train,
                               std::uint64_t seed, RegularizerScaling scaling = RegularizerScaling::kPerStep);

struct LossResult {
  LossBreakdown parts;
  ad::Gradients grads;
  double value() const { return parts.total; }
};

/// (N_train / B) sum CE + (tau_theta / 2) |theta|^2.
LossResult ps_map_loss(const Batch& batch, const ModelParams& params, double tau_theta, std::size_t n_train);
/// (N_train / B) sum CE - J(theta, x_hat); J is not rescaled.
LossResult eb_map_loss(const Batch& batch, const ModelParams& params, const Tensor& x_hat,
                       const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t n_train);
/// (N_train / B) (1/S) sum_s CE(theta + sigma eps_s) + F(theta).
LossResult eb_vi_loss(const Batch& batch, const ModelParams& params, const ContextDistribution& context,
                      const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t likelihood_samples,
                      std::size_t n_train, std::uint64_t seed);
LossResult eb_vi_loss(const Batch& batch, const ModelParams& params, std::span<const Tensor> context_batches,
                      const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t likelihood_samples,
                      std::size_t n_train, std::uint64_t seed);

/// Velocity per tensor in canonical parameter order.
struct MomentumState {
  std::vector<Tensor> velocity;
};

/// v <- momentum * v + g; theta <- theta - lr * v.
void sgd_momentum_step(ModelParams& params, const ad::Gradients& grads, MomentumState& state, double lr,
                       double momentum);

/// eta * (alpha + (1 - alpha) * (1 + cos(pi * step / total_steps)) / 2).
double cosine_lr(std::size_t step, std::size_t total_steps, double eta, double alpha);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double seconds = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_accuracy;
  std::optional<double> val_nll;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

/// Thrown when a step produces a non-finite loss or gradient.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, std::size_t step, LossBreakdown parts)
      : NumericalError(what), step_(step), parts_(parts) {}
  std::size_t step() const { return step_; }
  const LossBreakdown& parts() const { return parts_; }

 private:
  std::size_t step_;
  LossBreakdown parts_;
};

/// Runs momentum SGD from `init`. eb-map and eb-vi require a context
/// distribution and a feature snapshot; one context draw per step.
TrainResult train(const TrainConfig& config, const ModelParams& init, const Dataset& data,
                  const ContextDistribution* context = nullptr, const FeatureSnapshot* phi0 = nullptr,
                  const Dataset* validation = nullptr);

/// Mean of the members' softmax outputs.
Tensor ensemble_predict(std::span<const ModelParams> members, const Tensor& x);

}  // namespace fseb
