#include "fseb/training.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fseb/rng.hpp"

namespace fseb {

const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kPsMap: return "ps-map";
    case ObjectiveKind::kEbMap: return "eb-map";
    case ObjectiveKind::kEbVi: return "eb-vi";
  }
  return "unknown";
}

ObjectiveKind parse_objective(const std::string& s) {
  if (s == "ps-map") return ObjectiveKind::kPsMap;
  if (s == "eb-map") return ObjectiveKind::kEbMap;
  if (s == "eb-vi") return ObjectiveKind::kEbVi;
  throw ConfigError("unknown objective '" + s + "' (expected ps-map, eb-map or eb-vi)");
}

const char* to_string(RegularizerScaling s) { return s == RegularizerScaling::kPerStep ? "per-step" : "per-datum"; }

RegularizerScaling parse_regularizer_scaling(const std::string& s) {
  if (s == "per-step") return RegularizerScaling::kPerStep;
  if (s == "per-datum") return RegularizerScaling::kPerDatum;
  throw ConfigError("unknown regularizer_scaling '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
  if (!(cosine_alpha >= 0.0 && cosine_alpha <= 1.0)) throw ConfigError("train: cosine_alpha must be in [0, 1]");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (likelihood_mc_samples == 0) throw ConfigError("train: likelihood_mc_samples must be >= 1");
  prior.validate();
}

LossBreakdown ObjectiveTerms::breakdown() const {
  LossBreakdown b;
  b.data_nll = data.value().item();
  b.function_penalty = function_penalty.valid() ? function_penalty.value().item() : 0.0;
  b.param_penalty = param_penalty.value().item();
  b.total = total.value().item();
  return b;
}

namespace {

double data_scale(std::size_t batch, std::size_t n_train, RegularizerScaling scaling) {
  if (batch == 0) throw ConfigError("objective: empty batch");
  const double b = static_cast<double>(batch);
  return scaling == RegularizerScaling::kPerStep ? static_cast<double>(n_train) / b : 1.0 / b;
}

}  // namespace

ad::Var cross_entropy(const ad::Var& logits, const std::vector<std::size_t>& labels, double scale) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.shape()[0] != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_string(z.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t k = z.shape()[1];
  Tensor onehot(z.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                      " out of range for " + std::to_string(k) + " classes");
    }
    onehot(i, labels[i]) = 1.0;
  }
  ad::Tape& tape = *logits.tape();
  return ad::scalar_mul(ad::sum(ad::mul(ad::log_softmax(logits), tape.constant(std::move(onehot)))), -scale);
}

ObjectiveTerms ps_map_objective(const BoundParams& theta, const Batch& batch, double tau_theta, std::size_t n_train,
                                RegularizerScaling scaling) {
  ad::Tape& tape = *theta.head.tape();
  ObjectiveTerms t;
  t.data = cross_entropy(predict(tape.constant(batch.inputs), theta), batch.labels,
                         data_scale(batch.size(), n_train, scaling));
  t.param_penalty = ad::scalar_mul(squared_norm(theta), 0.5 * tau_theta);
  t.total = ad::add(t.data, t.param_penalty);
  return t;
}

ObjectiveTerms eb_map_objective(const BoundParams& theta, const Batch& batch, const Tensor& x_hat,
                                const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t n_train,
                                RegularizerScaling scaling) {
  ad::Tape& tape = *theta.head.tape();
  ObjectiveTerms t;
  t.data = cross_entropy(predict(tape.constant(batch.inputs), theta), batch.labels,
                         data_scale(batch.size(), n_train, scaling));
  const RegularizerTerms reg = eb_regularizer(theta, x_hat, phi0, cfg);
  t.function_penalty = reg.function_term;
  t.param_penalty = reg.param_term;
  // -J = function_term + param_term
  t.total = ad::add(t.data, ad::add(t.function_penalty, t.param_penalty));
  return t;
}

ObjectiveTerms eb_vi_objective(const BoundParams& theta, const Batch& batch, std::span<const Tensor> context_batches,
                               const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t likelihood_samples,
                               std::size_t n_train, std::uint64_t seed, RegularizerScaling scaling) {
  if (likelihood_samples == 0) throw ConfigError("eb_vi: likelihood_samples must be >= 1");
  ad::Tape& tape = *theta.head.tape();
  const ad::Var x = tape.constant(batch.inputs);
  const double scale = data_scale(batch.size(), n_train, scaling);
  const auto shapes = param_shapes(theta);

  ad::Var data_sum;
  for (std::size_t s = 0; s < likelihood_samples; ++s) {
    BoundParams p = theta;
    if (cfg.sigma != 0.0) {
      p = offset_params(theta, gaussian_noise(shapes, cfg.sigma, derive_seed(seed, Stream::kLikelihoodNoise, s)));
    }
    ad::Var ce = cross_entropy(predict(x, p), batch.labels, scale);
    data_sum = s == 0 ? ce : ad::add(data_sum, ce);
  }
  ObjectiveTerms t;
  t.data = ad::scalar_mul(data_sum, 1.0 / static_cast<double>(likelihood_samples));
  const KlEstimate kl = mc_kl_estimate(theta, context_batches, phi0, cfg, seed);
  t.function_penalty = kl.function_term;
  t.param_penalty = kl.param_term;
  // F = function_term + param_term
  t.total = ad::add(t.data, ad::add(t.function_penalty, t.param_penalty));
  return t;
}

namespace {

LossResult finish(ad::Tape& tape, const ObjectiveTerms& terms) {
  LossResult r;
  r.parts = terms.breakdown();
  r.grads = tape.backward(terms.total);
  return r;
}

}  // namespace

LossResult ps_map_loss(const Batch& batch, const ModelParams& params, double tau_theta, std::size_t n_train) {
  ad::Tape tape;
  const BoundParams theta = bind_params(tape, params);
  return finish(tape, ps_map_objective(theta, batch, tau_theta, n_train));
}

LossResult eb_map_loss(const Batch& batch, const ModelParams& params, const Tensor& x_hat,
                       const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t n_train) {
  ad::Tape tape;
  const BoundParams theta = bind_params(tape, params);
  return finish(tape, eb_map_objective(theta, batch, x_hat, phi0, cfg, n_train));
}

LossResult eb_vi_loss(const Batch& batch, const ModelParams& params, std::span<const Tensor> context_batches,
                      const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t likelihood_samples,
                      std::size_t n_train, std::uint64_t seed) {
  ad::Tape tape;
  const BoundParams theta = bind_params(tape, params);
  return finish(tape, eb_vi_objective(theta, batch, context_batches, phi0, cfg, likelihood_samples, n_train, seed));
}

LossResult eb_vi_loss(const Batch& batch, const ModelParams& params, const ContextDistribution& context,
                      const FeatureSnapshot& phi0, const PriorConfig& cfg, std::size_t likelihood_samples,
                      std::size_t n_train, std::uint64_t seed) {
  cfg.validate();
  const auto batches = draw_context_batches(context, cfg.mc_context_samples, cfg.context_batch_size, seed);
  return eb_vi_loss(batch, params, batches, phi0, cfg, likelihood_samples, n_train, seed);
}

void sgd_momentum_step(ModelParams& params, const ad::Gradients& grads, MomentumState& state, double lr,
                       double momentum) {
  const auto names = params.names();
  std::vector<Tensor*> slots;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    slots.push_back(&params.weights[l]);
    slots.push_back(&params.biases[l]);
  }
  slots.push_back(&params.head);
  if (state.velocity.empty()) {
    for (const Tensor* t : slots) state.velocity.emplace_back(t->shape());
  }
  if (state.velocity.size() != slots.size()) throw ShapeError("sgd_momentum_step: momentum state layout mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Tensor& g = grads.at(names[i]);
    Tensor& v = state.velocity[i];
    Tensor& p = *slots[i];
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("sgd_momentum_step: shape mismatch for '" + names[i] + "'");
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double eta, double alpha) {
  if (total_steps == 0) return eta;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return eta * (alpha + (1.0 - alpha) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

namespace {

// Per-step seed stream, separate from the minibatch order and init streams.
constexpr std::uint64_t kStepStream = 100;

std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << "data_nll=" << b.data_nll << " function_penalty=" << b.function_penalty
     << " param_penalty=" << b.param_penalty << " total=" << b.total;
  return os.str();
}

bool finite_grads(const ad::Gradients& g) {
  for (const auto& [name, t] : g.entries())
    if (!t.all_finite()) return false;
  return true;
}

}  // namespace

TrainResult train(const TrainConfig& config, const ModelParams& init, const Dataset& data,
                  const ContextDistribution* context, const FeatureSnapshot* phi0, const Dataset* validation) {
  config.validate();
  data.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  if (data.dim() != init.config.input_dim) {
    throw ShapeError("train: data dimension " + std::to_string(data.dim()) + " vs model input_dim " +
                     std::to_string(init.config.input_dim));
  }
  const bool function_space = config.objective != ObjectiveKind::kPsMap;
  if (function_space && (!context || !phi0)) {
    throw ConfigError(std::string("train: objective ") + to_string(config.objective) +
                      " needs a context distribution and a feature snapshot");
  }
  if (function_space) context->validate();

  const std::size_t n_train = config.n_train ? config.n_train : data.size();
  const std::size_t steps_per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  TrainResult result{init, {}};
  ModelParams& params = result.params;
  MomentumState state;
  std::optional<FeatureSnapshot> live_phi0;
  if (phi0) live_phi0.emplace(*phi0);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (function_space && config.phi0_refresh_epochs && epoch > 0 && epoch % config.phi0_refresh_epochs == 0) {
      live_phi0.emplace(params, SnapshotProvenance::kCurrentTrainSnapshot);
    }
    const auto order = minibatches(data.size(), config.batch_size, derive_seed(config.seed, Stream::kMinibatch, epoch));
    double loss_sum = 0.0;
    for (const auto& indices : order) {
      const auto t0 = std::chrono::steady_clock::now();
      const Batch batch = gather(data, indices);
      const std::uint64_t step_seed = derive_seed(config.seed, kStepStream, step);
      const double lr = cosine_lr(step, total_steps, config.lr, config.cosine_alpha);

      ad::Tape tape;
      const BoundParams theta = bind_params(tape, params);
      ObjectiveTerms terms;
      switch (config.objective) {
        case ObjectiveKind::kPsMap:
          terms = ps_map_objective(theta, batch, config.prior.tau_theta, n_train, config.regularizer_scaling);
          break;
        case ObjectiveKind::kEbMap: {
          const auto x_hat = draw_context_batches(*context, 1, config.prior.context_batch_size, step_seed);
          terms = eb_map_objective(theta, batch, x_hat.front(), *live_phi0, config.prior, n_train,
                                   config.regularizer_scaling);
          break;
        }
        case ObjectiveKind::kEbVi: {
          const auto x_hats = draw_context_batches(*context, config.prior.mc_context_samples,
                                                   config.prior.context_batch_size, step_seed);
          terms = eb_vi_objective(theta, batch, x_hats, *live_phi0, config.prior, config.likelihood_mc_samples,
                                  n_train, step_seed, config.regularizer_scaling);
          break;
        }
      }
      const LossBreakdown parts = terms.breakdown();
      if (!std::isfinite(parts.total)) {
        throw TrainingAborted("train: non-finite loss at step " + std::to_string(step) + " (" + describe(parts) + ")",
                              step, parts);
      }
      const ad::Gradients grads = tape.backward(terms.total);
      if (!finite_grads(grads)) {
        throw TrainingAborted("train: non-finite gradient at step " + std::to_string(step) + " (" + describe(parts) +
                                  ")",
                              step, parts);
      }
      sgd_momentum_step(params, grads, state, lr, config.momentum);
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.history.steps.push_back(StepRecord{step, epoch, lr, parts, seconds});
      loss_sum += parts.total;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(order.size());
    if (validation && validation->size() > 0) {
      const Tensor probs = predict_proba(validation->inputs, params);
      const std::size_t k = probs.cols();
      double nll = 0.0;
      std::size_t correct = 0;
      for (std::size_t i = 0; i < validation->size(); ++i) {
        const double* row = probs.data().data() + i * k;
        const std::size_t y = validation->labels[i];
        nll -= std::log(row[y]);
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        correct += best == y;
      }
      rec.val_nll = nll / static_cast<double>(validation->size());
      rec.val_accuracy = static_cast<double>(correct) / static_cast<double>(validation->size());
    }
    result.history.epochs.push_back(rec);
  }
  return result;
}

Tensor ensemble_predict(std::span<const ModelParams> members, const Tensor& x) {
  if (members.empty()) throw ConfigError("ensemble_predict: at least one member required");
  Tensor acc;
  for (std::size_t m = 0; m < members.size(); ++m) {
    Tensor p = predict_proba(x, members[m]);
    if (m == 0) {
      acc = std::move(p);
    } else {
      if (p.shape() != acc.shape()) throw ShapeError("ensemble_predict: members disagree on output shape");
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto& v : acc.data()) v *= inv;
  return acc;
}

}  // namespace fseb
