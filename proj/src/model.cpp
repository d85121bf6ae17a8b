#include "fseb/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fseb/rng.hpp"

namespace fseb {

const char* to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }
const char* to_string(InitScheme s) { return s == InitScheme::kHe ? "he" : "glorot"; }

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "' (expected tanh or relu)");
}

InitScheme parse_init_scheme(const std::string& s) {
  if (s == "he") return InitScheme::kHe;
  if (s == "glorot") return InitScheme::kGlorot;
  throw ConfigError("unknown init scheme '" + s + "' (expected he or glorot)");
}

InitScheme default_init(Activation a) {
  return a == Activation::kRelu ? InitScheme::kHe : InitScheme::kGlorot;
}

const char* to_string(SnapshotProvenance p) {
  switch (p) {
    case SnapshotProvenance::kRandomInit: return "random-init";
    case SnapshotProvenance::kPretrainedCheckpoint: return "pretrained-checkpoint";
    case SnapshotProvenance::kCurrentTrainSnapshot: return "current-train-snapshot";
  }
  return "unknown";
}

SnapshotProvenance parse_provenance(const std::string& s) {
  if (s == "random-init") return SnapshotProvenance::kRandomInit;
  if (s == "pretrained-checkpoint") return SnapshotProvenance::kPretrainedCheckpoint;
  if (s == "current-train-snapshot") return SnapshotProvenance::kCurrentTrainSnapshot;
  throw ConfigError("unknown snapshot provenance '" + s + "'");
}

std::size_t MlpConfig::feature_dim() const {
  validate();
  return hidden_widths.back();
}

void MlpConfig::validate() const {
  if (input_dim == 0) throw ConfigError("mlp: input_dim must be >= 1");
  if (output_dim == 0) throw ConfigError("mlp: output_dim must be >= 1");
  if (hidden_widths.empty()) throw ConfigError("mlp: hidden_widths must be non-empty");
  for (std::size_t i = 0; i < hidden_widths.size(); ++i) {
    if (hidden_widths[i] == 0) throw ConfigError("mlp: hidden width " + std::to_string(i) + " is zero");
  }
}

namespace {

Shape weight_shape(const MlpConfig& c, std::size_t layer) {
  const std::size_t n_in = layer == 0 ? c.input_dim : c.hidden_widths[layer - 1];
  return {n_in, c.hidden_widths[layer]};
}

void check_shape(const std::string& name, const Shape& expected, const Shape& found) {
  if (expected != found) {
    throw DataError("parameter '" + name + "': expected shape " + shape_string(expected) + ", found " +
                    shape_string(found));
  }
}

void check_input(const Tensor& x, const MlpConfig& c) {
  if (x.rank() != 2 || x.shape()[1] != c.input_dim) {
    throw ShapeError("features: input of shape " + shape_string(x.shape()) + " does not match input_dim " +
                     std::to_string(c.input_dim));
  }
}

Tensor hidden_forward(const Tensor& x, const MlpConfig& c, const std::vector<Tensor>& weights,
                      const std::vector<Tensor>& biases) {
  check_input(x, c);
  Tensor h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Tensor z = matmul(h, weights[l]);
    const std::size_t r = z.shape()[0], n = z.shape()[1];
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double v = z(i, j) + biases[l][j];
        z(i, j) = c.activation == Activation::kTanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
      }
    }
    h = std::move(z);
  }
  return h;
}

}  // namespace

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back("w" + std::to_string(l));
    out.push_back("b" + std::to_string(l));
  }
  out.emplace_back("head");
  return out;
}

std::map<std::string, Tensor> ModelParams::named() const {
  std::map<std::string, Tensor> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.emplace("w" + std::to_string(l), weights[l]);
    out.emplace("b" + std::to_string(l), biases[l]);
  }
  out.emplace("head", head);
  return out;
}

ModelParams ModelParams::from_named(const MlpConfig& config, const std::map<std::string, Tensor>& tensors) {
  config.validate();
  ModelParams p;
  p.config = config;
  auto fetch = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("parameter '" + name + "' missing");
    check_shape(name, shape, it->second.shape());
    return it->second;
  };
  for (std::size_t l = 0; l < config.hidden_widths.size(); ++l) {
    p.weights.push_back(fetch("w" + std::to_string(l), weight_shape(config, l)));
    p.biases.push_back(fetch("b" + std::to_string(l), {config.hidden_widths[l]}));
  }
  p.head = fetch("head", {config.feature_dim(), config.output_dim});
  const std::size_t expected = 2 * config.hidden_widths.size() + 1;
  if (tensors.size() != expected) {
    throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, expected " +
                    std::to_string(expected));
  }
  return p;
}

std::size_t ModelParams::param_count() const {
  std::size_t n = head.size();
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

double ModelParams::squared_norm() const {
  double s = 0.0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (double v : weights[l].data()) s += v * v;
    for (double v : biases[l].data()) s += v * v;
  }
  for (double v : head.data()) s += v * v;
  return s;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> out;
  out.reserve(param_count());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.insert(out.end(), weights[l].data().begin(), weights[l].data().end());
    out.insert(out.end(), biases[l].data().begin(), biases[l].data().end());
  }
  out.insert(out.end(), head.data().begin(), head.data().end());
  return out;
}

void ModelParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != param_count()) {
    throw ShapeError("assign_flat: expected " + std::to_string(param_count()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t k = 0;
  auto fill = [&](Tensor& t) {
    for (auto& v : t.data()) v = flat[k++];
  };
  for (std::size_t l = 0; l < weights.size(); ++l) {
    fill(weights[l]);
    fill(biases[l]);
  }
  fill(head);
}

FeatureSnapshot::FeatureSnapshot(const ModelParams& params, SnapshotProvenance provenance)
    : config_(params.config), weights_(params.weights), biases_(params.biases), provenance_(provenance) {}

ModelParams init_params(const MlpConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, Stream::kInit));
  auto draw = [&](std::size_t n_in, std::size_t n_out) {
    const double var = config.init == InitScheme::kHe ? 2.0 / static_cast<double>(n_in)
                                                      : 2.0 / static_cast<double>(n_in + n_out);
    const double sd = std::sqrt(var);
    Tensor w({n_in, n_out});
    for (auto& v : w.data()) v = sd * rng.normal();
    return w;
  };
  ModelParams p;
  p.config = config;
  for (std::size_t l = 0; l < config.hidden_widths.size(); ++l) {
    const Shape s = weight_shape(config, l);
    p.weights.push_back(draw(s[0], s[1]));
    p.biases.emplace_back(Shape{s[1]});
  }
  p.head = draw(config.feature_dim(), config.output_dim);
  return p;
}

Tensor features(const Tensor& x, const ModelParams& params) {
  return hidden_forward(x, params.config, params.weights, params.biases);
}

Tensor features(const Tensor& x, const FeatureSnapshot& phi0) {
  return hidden_forward(x, phi0.config(), phi0.weights(), phi0.biases());
}

Tensor predict(const Tensor& x, const ModelParams& params) { return matmul(features(x, params), params.head); }

Tensor softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  const std::size_t r = logits.rows(), c = logits.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, logits[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(logits[i * c + j] - m);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(logits[i * c + j] - m) / s;
  }
  return out;
}

Tensor predict_proba(const Tensor& x, const ModelParams& params) { return softmax_rows(predict(x, params)); }

std::vector<ad::Var> BoundParams::all() const {
  std::vector<ad::Var> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  out.push_back(head);
  return out;
}

BoundParams bind_params(ad::Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.activation = params.config.activation;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    b.weights.push_back(tape.leaf("w" + std::to_string(l), params.weights[l]));
    b.biases.push_back(tape.leaf("b" + std::to_string(l), params.biases[l]));
  }
  b.head = tape.leaf("head", params.head);
  return b;
}

BoundParams offset_params(const BoundParams& bound, std::span<const Tensor> offsets) {
  const std::size_t layers = bound.weights.size();
  if (offsets.size() != 2 * layers + 1) {
    throw ShapeError("offset_params: expected " + std::to_string(2 * layers + 1) + " offsets, got " +
                     std::to_string(offsets.size()));
  }
  ad::Tape& tape = *bound.head.tape();
  BoundParams out;
  out.activation = bound.activation;
  for (std::size_t l = 0; l < layers; ++l) {
    out.weights.push_back(ad::add(bound.weights[l], tape.constant(offsets[2 * l])));
    out.biases.push_back(ad::add(bound.biases[l], tape.constant(offsets[2 * l + 1])));
  }
  out.head = ad::add(bound.head, tape.constant(offsets[2 * layers]));
  return out;
}

std::vector<Shape> param_shapes(const BoundParams& bound) {
  std::vector<Shape> out;
  for (const auto& v : bound.all()) out.push_back(v.shape());
  return out;
}

ad::Var features(const ad::Var& x, const BoundParams& params) {
  const std::size_t expected = params.weights.front().shape()[0];
  if (x.value().rank() != 2 || x.shape()[1] != expected) {
    throw ShapeError("features: input of shape " + shape_string(x.shape()) + " does not match input_dim " +
                     std::to_string(expected));
  }
  ad::Var h = x;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    ad::Var z = ad::add(ad::matmul(h, params.weights[l]), params.biases[l]);
    h = params.activation == Activation::kTanh ? ad::tanh(z) : ad::relu(z);
  }
  return h;
}

ad::Var predict(const ad::Var& x, const BoundParams& params) {
  return ad::matmul(features(x, params), params.head);
}

ad::Var squared_norm(const BoundParams& params) {
  const auto vars = params.all();
  ad::Var total = ad::sum(ad::square(vars.front()));
  for (std::size_t i = 1; i < vars.size(); ++i) total = ad::add(total, ad::sum(ad::square(vars[i])));
  return total;
}

FeatureSnapshot snapshot_feature_params(const ModelParams& params, SnapshotProvenance provenance) {
  return FeatureSnapshot(params, provenance);
}

FeatureSnapshot snapshot_feature_params(const std::filesystem::path& checkpoint, const MlpConfig& config) {
  return FeatureSnapshot(load_checkpoint(checkpoint, config), SnapshotProvenance::kPretrainedCheckpoint);
}

std::vector<Tensor> gaussian_noise(const std::vector<Shape>& shapes, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("gaussian_noise: sigma must be >= 0");
  Rng rng(seed);
  std::vector<Tensor> out;
  out.reserve(shapes.size());
  for (const auto& shape : shapes) {
    Tensor t(shape);
    for (auto& v : t.data()) v = sigma * rng.normal();
    out.push_back(std::move(t));
  }
  return out;
}

ModelParams param_noise(const ModelParams& params, double sigma, std::uint64_t seed) {
  std::vector<Shape> shapes;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    shapes.push_back(params.weights[l].shape());
    shapes.push_back(params.biases[l].shape());
  }
  shapes.push_back(params.head.shape());
  auto noise = gaussian_noise(shapes, sigma, seed);
  ModelParams out = params;
  for (std::size_t l = 0; l < out.weights.size(); ++l) {
    out.weights[l] = std::move(noise[2 * l]);
    out.biases[l] = std::move(noise[2 * l + 1]);
  }
  out.head = std::move(noise.back());
  return out;
}

ModelParams perturb_params(const ModelParams& params, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("perturb_params: sigma must be >= 0");
  if (sigma == 0.0) return params;
  const ModelParams noise = param_noise(params, sigma, seed);
  ModelParams out = params;
  auto shift = [](Tensor& t, const Tensor& n) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += n[i];
  };
  for (std::size_t l = 0; l < out.weights.size(); ++l) {
    shift(out.weights[l], noise.weights[l]);
    shift(out.biases[l], noise.biases[l]);
  }
  shift(out.head, noise.head);
  return out;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

bool get_bytes(std::istream& is, unsigned char* b, std::size_t n) {
  is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(is.gcount()) == n;
}

std::uint64_t le_value(const unsigned char* b, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write("FSEB", 4);
  put_u32(os, kCheckpointVersion);
  const auto named = params.named();
  for (const auto& name : params.names()) {
    const Tensor& t = named.at(name);
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u64(os, e);
    for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  unsigned char b[8];
  if (!get_bytes(is, b, 4) || std::memcmp(b, "FSEB", 4) != 0) {
    throw DataError("checkpoint " + path.string() + ": bad magic (expected FSEB)");
  }
  if (!get_bytes(is, b, 4)) throw DataError("checkpoint " + path.string() + ": truncated header");
  const auto version = static_cast<std::uint32_t>(le_value(b, 4));
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  }
  std::map<std::string, Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    auto truncated = [&] { return DataError("checkpoint " + path.string() + ": truncated tensor record"); };
    if (!get_bytes(is, b, 4)) throw truncated();
    const auto name_len = le_value(b, 4);
    if (name_len > 4096) throw DataError("checkpoint " + path.string() + ": implausible name length");
    std::string name(name_len, '\0');
    if (!get_bytes(is, reinterpret_cast<unsigned char*>(name.data()), name_len)) throw truncated();
    if (!get_bytes(is, b, 4)) throw truncated();
    const auto rank = le_value(b, 4);
    if (rank > 8) throw DataError("checkpoint " + path.string() + ": implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) {
      if (!get_bytes(is, b, 8)) throw truncated();
      shape.push_back(static_cast<std::size_t>(le_value(b, 8)));
    }
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) {
      if (!get_bytes(is, b, 8)) throw truncated();
      v = std::bit_cast<double>(le_value(b, 8));
    }
    if (!out.emplace(name, Tensor(shape, std::move(data))).second) {
      throw DataError("checkpoint " + path.string() + ": duplicate tensor '" + name + "'");
    }
  }
  return out;
}

ModelParams load_checkpoint(const std::filesystem::path& path, const MlpConfig& config) {
  return ModelParams::from_named(config, read_checkpoint(path));
}

}  // namespace fseb
