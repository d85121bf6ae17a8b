#include "fseb/function_prior.hpp"

#include <cmath>

#include "fseb/data.hpp"
#include "fseb/linalg.hpp"
#include "fseb/rng.hpp"

namespace fseb {

void PriorConfig::validate() const {
  if (!(tau_f >= 0.0) || !std::isfinite(tau_f)) throw ConfigError("prior: tau_f must be finite and >= 0");
  if (!(tau_theta >= 0.0) || !std::isfinite(tau_theta)) throw ConfigError("prior: tau_theta must be finite and >= 0");
  if (context_batch_size == 0) throw ConfigError("prior: context_batch_size must be >= 1");
  if (mc_context_samples == 0 || mc_param_samples == 0) throw ConfigError("prior: MC sample counts must be >= 1");
  if (!(sigma >= 0.0)) throw ConfigError("prior: sigma must be >= 0");
}

ContextKernel build_kernel(const Tensor& h) {
  if (h.rank() != 2) throw ShapeError("build_kernel: features must be M x d, got " + shape_string(h.shape()));
  if (!h.all_finite()) throw NumericalError("build_kernel: non-finite context features");
  ContextKernel k;
  k.m = h.shape()[0];
  k.matrix = linalg::gram_plus_identity(h);
  if (auto l = linalg::try_cholesky(k.matrix)) {
    k.chol = std::make_shared<const Tensor>(std::move(*l));
    return k;
  }
  double jitter = 1e-10;
  for (int step = 0; step <= 20; ++step, jitter *= 2.0) {
    Tensor shifted = k.matrix;
    for (std::size_t i = 0; i < k.m; ++i) shifted(i, i) += jitter;
    if (auto l = linalg::try_cholesky(shifted)) {
      k.chol = std::make_shared<const Tensor>(std::move(*l));
      k.jitter_added = jitter;
      return k;
    }
  }
  throw NumericalError("build_kernel: factorization failed after maximum jitter");
}

double mahalanobis_sq(std::span<const double> v, const ContextKernel& kernel) {
  if (v.size() != kernel.m) {
    throw ShapeError("mahalanobis_sq: vector length " + std::to_string(v.size()) + " vs kernel size " +
                     std::to_string(kernel.m));
  }
  return linalg::cholesky_quad_form(*kernel.chol, v);
}

ad::Var mahalanobis_sq(const ad::Var& v, const ContextKernel& kernel) {
  return ad::quad_form_fixed(v, kernel.chol);
}

RegularizerTerms eb_regularizer(const BoundParams& theta, const Tensor& x_hat, const ContextKernel& kernel,
                                const PriorConfig& cfg) {
  ad::Tape& tape = *theta.head.tape();
  ad::Var f = predict(tape.constant(x_hat), theta);
  RegularizerTerms t;
  t.function_term = ad::scalar_mul(mahalanobis_sq(f, kernel), 0.5 * cfg.tau_f);
  t.param_term = ad::scalar_mul(squared_norm(theta), 0.5 * cfg.tau_theta);
  t.value = ad::scalar_mul(ad::add(t.function_term, t.param_term), -1.0);
  return t;
}

RegularizerTerms eb_regularizer(const BoundParams& theta, const Tensor& x_hat, const FeatureSnapshot& phi0,
                                const PriorConfig& cfg) {
  return eb_regularizer(theta, x_hat, build_kernel(features(x_hat, phi0)), cfg);
}

double eb_regularizer(const ModelParams& theta, const Tensor& x_hat, const FeatureSnapshot& phi0,
                      const PriorConfig& cfg) {
  ad::Tape tape;
  const BoundParams bound = bind_params(tape, theta);
  return eb_regularizer(bound, x_hat, phi0, cfg).value.value().item();
}

KlEstimate mc_kl_estimate(const BoundParams& theta, std::span<const Tensor> context_batches,
                          const FeatureSnapshot& phi0, const PriorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (context_batches.empty()) throw ConfigError("mc_kl_estimate: no context batches");
  const std::size_t n_param = cfg.mc_param_samples;
  const auto shapes = param_shapes(theta);

  std::vector<BoundParams> perturbed;
  for (std::size_t j = 0; j < n_param; ++j) {
    if (cfg.sigma == 0.0) {
      perturbed.push_back(theta);
    } else {
      const auto noise = gaussian_noise(shapes, cfg.sigma, derive_seed(seed, Stream::kPriorNoise, j));
      perturbed.push_back(offset_params(theta, noise));
    }
  }

  ad::Var fn_sum, param_sum;
  bool first = true;
  for (const Tensor& x_hat : context_batches) {
    const ContextKernel kernel = build_kernel(features(x_hat, phi0));
    for (const auto& p : perturbed) {
      const RegularizerTerms t = eb_regularizer(p, x_hat, kernel, cfg);
      if (first) {
        fn_sum = t.function_term;
        param_sum = t.param_term;
        first = false;
      } else {
        fn_sum = ad::add(fn_sum, t.function_term);
        param_sum = ad::add(param_sum, t.param_term);
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(context_batches.size() * n_param);
  KlEstimate est;
  est.function_term = ad::scalar_mul(fn_sum, inv);
  est.param_term = ad::scalar_mul(param_sum, inv);
  est.value = ad::add(est.function_term, est.param_term);
  return est;
}

std::vector<Tensor> draw_context_batches(const ContextDistribution& dist, std::size_t count, std::size_t batch_size,
                                         std::uint64_t seed) {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_context(dist, batch_size, derive_seed(seed, Stream::kContext, i)));
  }
  return out;
}

KlEstimate mc_kl_estimate(const BoundParams& theta, const ContextDistribution& dist, const FeatureSnapshot& phi0,
                          const PriorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto batches = draw_context_batches(dist, cfg.mc_context_samples, cfg.context_batch_size, seed);
  return mc_kl_estimate(theta, batches, phi0, cfg, seed);
}

double mc_kl_estimate(const ModelParams& theta, const ContextDistribution& dist, const FeatureSnapshot& phi0,
                      const PriorConfig& cfg, std::uint64_t seed) {
  ad::Tape tape;
  const BoundParams bound = bind_params(tape, theta);
  return mc_kl_estimate(bound, dist, phi0, cfg, seed).value.value().item();
}

}  // namespace fseb
