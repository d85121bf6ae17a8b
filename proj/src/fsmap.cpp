#include "fseb/fsmap.hpp"

#include <Eigen/SVD>
#include <cmath>

#include "fseb/training.hpp"

namespace fseb::fsmap {

NamedParams NamedParams::from(const ModelParams& params) {
  NamedParams out;
  out.names = params.names();
  const auto named = params.named();
  for (const auto& n : out.names) out.values.push_back(named.at(n));
  return out;
}

std::size_t NamedParams::count() const {
  std::size_t n = 0;
  for (const auto& t : values) n += t.size();
  return n;
}

OutputFn mlp_output_fn(const MlpConfig& config) {
  const std::size_t layers = config.hidden_widths.size();
  const Activation act = config.activation;
  return [layers, act](const ad::Var& x, std::span<const ad::Var> leaves) {
    BoundParams b;
    b.activation = act;
    for (std::size_t l = 0; l < layers; ++l) {
      b.weights.push_back(leaves[2 * l]);
      b.biases.push_back(leaves[2 * l + 1]);
    }
    b.head = leaves[2 * layers];
    return predict(x, b);
  };
}

namespace {

std::vector<ad::Var> bind(ad::Tape& tape, const NamedParams& params) {
  std::vector<ad::Var> leaves;
  for (std::size_t i = 0; i < params.values.size(); ++i) leaves.push_back(tape.leaf(params.names[i], params.values[i]));
  return leaves;
}

void check_cap(const NamedParams& params) {
  const std::size_t p = params.count();
  if (p > kMaxParams) {
    throw ConfigError("fs-map reference: " + std::to_string(p) + " parameters exceeds the cap of " +
                      std::to_string(kMaxParams) + "; use a narrower network");
  }
}

}  // namespace

JacobianBlock dense_jacobian(const OutputFn& fn, const NamedParams& params, const Tensor& x_hat) {
  check_cap(params);
  const std::size_t p = params.count();
  // Shape probe.
  Tensor out_shape_probe;
  {
    ad::Tape tape;
    const auto leaves = bind(tape, params);
    out_shape_probe = fn(tape.constant(x_hat), leaves).value();
  }
  const std::size_t rows = out_shape_probe.size();
  JacobianBlock jac;
  jac.matrix = Tensor({rows, p});
  jac.eval_points = x_hat;
  jac.param_count = p;
  for (std::size_t r = 0; r < rows; ++r) {
    ad::Tape tape;
    const auto leaves = bind(tape, params);
    const ad::Var out = fn(tape.constant(x_hat), leaves);
    Tensor selector(out.shape());
    selector[r] = 1.0;
    const ad::Var picked = ad::sum(ad::mul(out, tape.constant(std::move(selector))));
    const ad::Gradients g = tape.backward(picked);
    std::size_t col = 0;
    for (const auto& name : params.names) {
      for (double v : g.at(name).data()) jac.matrix(r, col++) = v;
    }
  }
  return jac;
}

JacobianBlock dense_jacobian(const ModelParams& params, const Tensor& x_hat) {
  return dense_jacobian(mlp_output_fn(params.config), NamedParams::from(params), x_hat);
}

LogDetCorrection log_det_correction(const Tensor& jacobian) {
  const std::size_t rows = jacobian.rows(), cols = jacobian.cols();
  if (rows < cols) {
    throw ConfigError("log_det_correction: need MK >= P, got " + std::to_string(rows) + " rows for " +
                      std::to_string(cols) + " parameters");
  }
  Eigen::MatrixXd j(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) j(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = jacobian(r, c);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(j);
  const Eigen::VectorXd& s = svd.singularValues();
  LogDetCorrection out;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] * s[i] < kLogDetJitter) out.jitter_used = true;
  }
  double acc = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    acc += out.jitter_used ? 0.5 * std::log(s[i] * s[i] + kLogDetJitter) : std::log(s[i]);
  }
  out.value = -acc;
  return out;
}

LogDetCorrection log_det_correction(const JacobianBlock& jac) { return log_det_correction(jac.matrix); }

ad::Gradients correction_gradient(const OutputFn& fn, const NamedParams& params, const Tensor& x_hat, double fd_step) {
  std::map<std::string, Tensor> named;
  for (std::size_t i = 0; i < params.values.size(); ++i) named.emplace(params.names[i], params.values[i]);
  auto eval = [&](const std::map<std::string, Tensor>& probe) {
    NamedParams p = params;
    for (std::size_t i = 0; i < p.names.size(); ++i) p.values[i] = probe.at(p.names[i]);
    return log_det_correction(dense_jacobian(fn, p, x_hat)).value;
  };
  return ad::finite_difference_grad(eval, named, fd_step);
}

FsMapLoss fs_map_loss(const Batch& batch, const OutputFn& fn, const NamedParams& params, const Tensor& x_hat,
                      double tau_theta, bool with_correction, double fd_step) {
  check_cap(params);
  FsMapLoss out;
  ad::Tape tape;
  const auto leaves = bind(tape, params);
  const ad::Var ce = cross_entropy(fn(tape.constant(batch.inputs), leaves), batch.labels, 1.0);
  ad::Var norm = ad::sum(ad::square(leaves.front()));
  for (std::size_t i = 1; i < leaves.size(); ++i) norm = ad::add(norm, ad::sum(ad::square(leaves[i])));
  const ad::Var penalty = ad::scalar_mul(norm, 0.5 * tau_theta);
  const ad::Var total = ad::add(ce, penalty);
  out.cross_entropy = ce.value().item();
  out.param_penalty = penalty.value().item();
  out.grads = tape.backward(total);
  out.value = out.cross_entropy + out.param_penalty;
  if (with_correction) {
    const LogDetCorrection c = log_det_correction(dense_jacobian(fn, params, x_hat));
    out.correction = c.value;
    out.jitter_used = c.jitter_used;
    out.value -= c.value;
    const ad::Gradients cg = correction_gradient(fn, params, x_hat, fd_step);
    for (const auto& name : params.names) {
      Tensor g = out.grads.at(name);
      const Tensor& d = cg.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= d[i];
      out.grads.set(name, std::move(g));
    }
  }
  return out;
}

FsMapLoss fs_map_loss(const Batch& batch, const ModelParams& params, const Tensor& x_hat, double tau_theta,
                      bool with_correction, double fd_step) {
  return fs_map_loss(batch, mlp_output_fn(params.config), NamedParams::from(params), x_hat, tau_theta,
                     with_correction, fd_step);
}

}  // namespace fseb::fsmap
