#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fseb/autodiff.hpp"
#include "fseb/tensor.hpp"

namespace fseb {

enum class Activation { kTanh, kRelu };
enum class InitScheme { kHe, kGlorot };

const char* to_string(Activation a);
const char* to_string(InitScheme s);
Activation parse_activation(const std::string& s);
InitScheme parse_init_scheme(const std::string& s);

/// He for relu, Glorot for tanh.
InitScheme default_init(Activation a);

struct MlpConfig {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_widths{32, 32};
  std::size_t output_dim = 2;
  Activation activation = Activation::kTanh;
  InitScheme init = InitScheme::kGlorot;
  std::uint64_t seed = 0;

  /// Width of the last hidden layer.
  std::size_t feature_dim() const;
  /// Throws ConfigError on zero dims or an empty hidden_widths list.
  void validate() const;
};

/// Network parameters theta = (theta_h, theta_L).
///
/// theta_h is the stack of hidden (weight, bias) pairs; weights are stored
/// n_in x n_out so a batch maps as x W + b. theta_L is the d x K head with no
/// bias, so logits are exactly h(x; theta_h) theta_L.
struct ModelParams {
  MlpConfig config;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  Tensor head;

  /// Canonical order: w0, b0, w1, b1, ..., head.
  std::vector<std::string> names() const;
  std::map<std::string, Tensor> named() const;
  /// Rebuilds from named tensors, checking every shape against `config`.
  static ModelParams from_named(const MlpConfig& config, const std::map<std::string, Tensor>& tensors);

  std::size_t param_count() const;
  /// Sum of squares over all of theta, hidden biases included.
  double squared_norm() const;

  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.weights == b.weights && a.biases == b.biases && a.head == b.head;
  }
};

enum class SnapshotProvenance { kRandomInit, kPretrainedCheckpoint, kCurrentTrainSnapshot };
const char* to_string(SnapshotProvenance p);
SnapshotProvenance parse_provenance(const std::string& s);

/// Frozen feature-extractor parameters phi0 used to build the context kernel.
class FeatureSnapshot {
 public:
  FeatureSnapshot(const ModelParams& params, SnapshotProvenance provenance);

  const MlpConfig& config() const { return config_; }
  const std::vector<Tensor>& weights() const { return weights_; }
  const std::vector<Tensor>& biases() const { return biases_; }
  SnapshotProvenance provenance() const { return provenance_; }

 private:
  MlpConfig config_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
  SnapshotProvenance provenance_;
};

ModelParams init_params(const MlpConfig& config);

/// Feature map h(x) for a B x D batch; B may be zero.
Tensor features(const Tensor& x, const ModelParams& params);
Tensor features(const Tensor& x, const FeatureSnapshot& phi0);
/// B x K logits, features(x) * head.
Tensor predict(const Tensor& x, const ModelParams& params);

/// Row-wise softmax of predict().
Tensor predict_proba(const Tensor& x, const ModelParams& params);
Tensor softmax_rows(const Tensor& logits);

/// Parameters as tape variables, in the canonical order.
struct BoundParams {
  Activation activation = Activation::kTanh;
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
  ad::Var head;

  std::vector<ad::Var> all() const;
};

/// Registers every tensor as a differentiable leaf named as in names().
BoundParams bind_params(ad::Tape& tape, const ModelParams& params);
/// theta + offset recorded on the tape; offsets follow the canonical order.
BoundParams offset_params(const BoundParams& bound, std::span<const Tensor> offsets);
std::vector<Shape> param_shapes(const BoundParams& bound);

ad::Var features(const ad::Var& x, const BoundParams& params);
ad::Var predict(const ad::Var& x, const BoundParams& params);
/// Sum of squares over every bound tensor.
ad::Var squared_norm(const BoundParams& params);

FeatureSnapshot snapshot_feature_params(const ModelParams& params,
                                        SnapshotProvenance provenance = SnapshotProvenance::kRandomInit);
/// Loads a checkpoint written by save_checkpoint() and snapshots its feature
/// layers with provenance pretrained-checkpoint.
FeatureSnapshot snapshot_feature_params(const std::filesystem::path& checkpoint, const MlpConfig& config);

/// sigma * eps with eps ~ N(0, I), one tensor per shape, drawn in order.
std::vector<Tensor> gaussian_noise(const std::vector<Shape>& shapes, double sigma, std::uint64_t seed);
/// gaussian_noise() laid out like `params`.
ModelParams param_noise(const ModelParams& params, double sigma, std::uint64_t seed);
/// theta + sigma * eps; sigma == 0 returns theta unchanged.
ModelParams perturb_params(const ModelParams& params, double sigma, std::uint64_t seed);

/// Binary layout: "FSEB", u32 version, then for each tensor: u32 name length,
/// name bytes, u32 rank, u64 extents, little-endian f64 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path, const MlpConfig& config);

}  // namespace fseb
