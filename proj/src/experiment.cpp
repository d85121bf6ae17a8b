#include "fseb/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "fseb/rng.hpp"

#ifndef FSEB_VERSION
#define FSEB_VERSION "0.1.0-unknown"
#endif

namespace fseb::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

const char* version_string() { return FSEB_VERSION; }

namespace {

// ---------------------------------------------------------------------------
// Config reading

[[noreturn]] void field_error(const std::string& where, const std::string& what) {
  throw ConfigError("config field '" + where + "': " + what);
}

void read(const json& j, const std::string& w, double& out) {
  if (!j.is_number()) field_error(w, "expected a number");
  out = j.get<double>();
}
void read(const json& j, const std::string& w, std::uint64_t& out) {
  if (j.is_number_unsigned()) {
    out = j.get<std::uint64_t>();
  } else if (j.is_number_integer()) {
    field_error(w, "expected a non-negative integer, got " + j.dump());
  } else {
    field_error(w, "expected a non-negative integer");
  }
}
void read(const json& j, const std::string& w, int& out) {
  if (!j.is_number_integer()) field_error(w, "expected an integer");
  out = j.get<int>();
}
void read(const json& j, const std::string& w, std::string& out) {
  if (!j.is_string()) field_error(w, "expected a string");
  out = j.get<std::string>();
}
template <class T>
void read(const json& j, const std::string& w, std::vector<T>& out) {
  if (!j.is_array()) field_error(w, "expected an array");
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    T v{};
    read(j[i], w + "[" + std::to_string(i) + "]", v);
    out.push_back(std::move(v));
  }
}

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError(path_.empty() ? "config: top level must be an object" : "config field '" + path_ + "': expected an object");
    }
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& at(const std::string& key) {
    if (!has(key)) field_error(where(key), "is required");
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (has(key)) read(j_.at(key), where(key), fallback);
    return fallback;
  }

  template <class T>
  T need(const std::string& key) {
    T v{};
    read(at(key), where(key), v);
    return v;
  }

  Reader child(const std::string& key) { return Reader(at(key), where(key)); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) field_error(where(it.key()), "is not recognized");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

fs::path resolve(const std::string& p, const fs::path& base) {
  fs::path out(p);
  if (out.is_relative() && !base.empty()) out = (base / out).lexically_normal();
  return out;
}

template <class Fn>
auto enum_field(Reader& r, const std::string& key, Fn parse, decltype(parse(std::string{})) fallback) {
  if (!r.has(key)) return fallback;
  const auto s = r.need<std::string>(key);
  try {
    return parse(s);
  } catch (const std::exception& e) {
    field_error(r.where(key), e.what());
  }
}

std::shared_ptr<DataSpec> read_data(Reader r, const fs::path& base, bool training) {
  auto d = std::make_shared<DataSpec>();
  d->kind = r.need<std::string>("kind");
  d->n = r.get<std::uint64_t>("n", d->n);
  d->noise = r.get("noise", d->noise);
  if (r.has("centers")) read(r.at("centers"), r.where("centers"), d->centers);
  d->sd = r.get("sd", d->sd);
  if (r.has("path")) d->path = resolve(r.need<std::string>("path"), base);
  if (r.has("labels_path")) d->labels_path = resolve(r.need<std::string>("labels_path"), base);
  d->num_classes = r.get<std::uint64_t>("num_classes", 0);
  if (training) {
    d->fraction = r.get("fraction", d->fraction);
    d->label_noise = r.get("label_noise", d->label_noise);
    d->test_n = r.get<std::uint64_t>("test_n", 0);
    if (r.has("test")) d->test = read_data(r.child("test"), base, false);
  }
  r.finish();

  const std::string w = r.where("kind");
  if (d->kind == "two-moons") {
    if (d->n < 2 || d->n % 2) field_error(r.where("n"), "two-moons needs an even n >= 2");
    if (d->test_n % 2) field_error(r.where("test_n"), "two-moons needs an even test_n");
  } else if (d->kind == "blobs") {
    if (d->centers.empty()) field_error(r.where("centers"), "blobs need at least one center");
    for (const auto& c : d->centers) {
      if (c.empty() || c.size() != d->centers.front().size()) field_error(r.where("centers"), "centers must share one non-zero dimension");
    }
    if (d->n == 0) field_error(r.where("n"), "must be >= 1");
  } else if (d->kind == "csv" || d->kind == "idx") {
    if (d->path.empty()) field_error(r.where("path"), "is required for kind " + d->kind);
    if (!fs::exists(d->path)) field_error(r.where("path"), "file not found: " + d->path.string());
    if (d->kind == "idx") {
      if (d->labels_path.empty()) field_error(r.where("labels_path"), "is required for kind idx");
      if (!fs::exists(d->labels_path)) field_error(r.where("labels_path"), "file not found: " + d->labels_path.string());
    }
    if (training && !d->test) field_error(r.where("test"), "a test set spec is required for file-backed data");
  } else {
    field_error(w, "unknown data kind '" + d->kind + "' (two-moons, blobs, csv, idx)");
  }
  if (!(d->noise >= 0.0) || !(d->sd >= 0.0)) field_error(r.where("noise"), "noise and sd must be >= 0");
  if (!(d->fraction > 0.0 && d->fraction <= 1.0)) field_error(r.where("fraction"), "must be in (0, 1]");
  if (!(d->label_noise >= 0.0 && d->label_noise < 1.0)) field_error(r.where("label_noise"), "must be in [0, 1)");
  return d;
}

CorruptionSpec read_corruption(Reader r) {
  const CorruptionKind kind =
      enum_field(r, "kind", [](const std::string& s) { return parse_corruption_kind(s); }, CorruptionKind::kGaussianNoise);
  const int level = r.need<int>("level");
  if (level < 1 || level > 5) field_error(r.where("level"), "must be in 1..5");
  CorruptionSpec spec = CorruptionSpec::standard(kind, level);
  if (r.has("magnitudes")) {
    std::vector<double> m;
    read(r.at("magnitudes"), r.where("magnitudes"), m);
    if (m.size() != 5) field_error(r.where("magnitudes"), "expected 5 values");
    std::copy(m.begin(), m.end(), spec.magnitudes.begin());
  }
  r.finish();
  try {
    spec.validate();
  } catch (const std::exception& e) {
    field_error(r.where("magnitudes"), e.what());
  }
  return spec;
}

json corruption_json(const CorruptionSpec& c) {
  return {{"kind", to_string(c.kind)}, {"level", c.level}, {"magnitudes", c.magnitudes}};
}

json data_json(const DataSpec& d, bool training) {
  json j;
  j["kind"] = d.kind;
  if (d.kind == "two-moons" || d.kind == "blobs") {
    j["n"] = d.n;
    if (d.kind == "two-moons") {
      j["noise"] = d.noise;
    } else {
      j["centers"] = d.centers;
      j["sd"] = d.sd;
    }
  } else {
    j["path"] = d.path.string();
    if (d.kind == "idx") j["labels_path"] = d.labels_path.string();
    j["num_classes"] = d.num_classes;
  }
  if (training) {
    j["fraction"] = d.fraction;
    j["label_noise"] = d.label_noise;
    if (d.kind == "two-moons" || d.kind == "blobs") j["test_n"] = d.test_n;
    if (d.test) j["test"] = data_json(*d.test, false);
  }
  return j;
}

std::size_t synthetic_dim(const DataSpec& d) {
  if (d.kind == "two-moons") return 2;
  if (d.kind == "blobs") return d.centers.front().size();
  return 0;
}

std::size_t synthetic_classes(const DataSpec& d) {
  if (d.kind == "two-moons") return 2;
  if (d.kind == "blobs") return d.centers.size();
  return d.num_classes;
}

void validate(const ExperimentConfig& c) {
  try {
    c.model.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config field 'model': ") + e.what());
  }
  try {
    c.train.validate();
    c.train.prior.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config field 'train'/'prior': ") + e.what());
  }
  if (c.seeds.empty()) field_error("seeds", "at least one seed is required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    field_error("seeds", "seeds must be distinct");
  }
  if (const std::size_t d = synthetic_dim(c.data); d && d != c.model.input_dim) {
    field_error("model.input_dim", "is " + std::to_string(c.model.input_dim) + " but the data has dimension " + std::to_string(d));
  }
  if (const std::size_t k = synthetic_classes(c.data); k && k != c.model.output_dim) {
    field_error("model.output_dim", "is " + std::to_string(c.model.output_dim) + " but the data has " + std::to_string(k) + " classes");
  }
  const bool function_space = c.train.objective != ObjectiveKind::kPsMap;
  if (function_space && c.context.kind == ContextKind::kUniformBox) {
    if (c.context.low.size() != c.model.input_dim || c.context.high.size() != c.model.input_dim) {
      field_error("context.low", "uniform-box bounds must have input_dim entries");
    }
    for (std::size_t j = 0; j < c.context.low.size(); ++j) {
      if (!(c.context.low[j] < c.context.high[j])) field_error("context.high", "need low < high in every dimension");
    }
  }
  if (function_space && c.context.kind == ContextKind::kTrainCorrupted && !c.context.corruption) {
    field_error("context.corruption", "is required for train-corrupted");
  }
  if (function_space && c.context.kind == ContextKind::kExternalDataset && !c.context.source) {
    field_error("context.source", "is required for external-dataset");
  }
  if (c.phi0.provenance == SnapshotProvenance::kPretrainedCheckpoint) {
    if (c.phi0.checkpoint.empty()) field_error("phi0.checkpoint", "is required for pretrained-checkpoint");
    if (!fs::exists(c.phi0.checkpoint)) field_error("phi0.checkpoint", "file not found: " + c.phi0.checkpoint.string());
  }
  if (c.phi0.provenance == SnapshotProvenance::kCurrentTrainSnapshot && c.train.phi0_refresh_epochs == 0) {
    field_error("train.phi0_refresh_epochs", "must be >= 1 for phi0 provenance current-train-snapshot");
  }
  if (c.eval.m_bins == 0) field_error("eval.m_bins", "must be >= 1");
  if (c.eval.grid) {
    try {
      c.eval.grid->validate();
    } catch (const std::exception& e) {
      field_error("eval.grid", e.what());
    }
    if (c.eval.grid->low.size() != c.model.input_dim) field_error("eval.grid.low", "must have input_dim entries");
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Running

template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t extra = std::min(std::max<std::size_t>(workers, 1), n);
  for (std::size_t w = 1; w < extra; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Dataset make_dataset(const DataSpec& s, std::uint64_t seed, std::size_t n_override = 0) {
  const std::size_t n = n_override ? n_override : s.n;
  if (s.kind == "two-moons") return gen_two_moons(n, s.noise, seed);
  if (s.kind == "blobs") return gen_gaussian_blobs(n, s.centers, s.sd, seed);
  if (s.kind == "csv") return load_tabular(s.path, TabularFormat::kCsvLabeled, {}, s.num_classes);
  return load_tabular(s.path, TabularFormat::kIdxPair, s.labels_path, s.num_classes);
}

struct SeedData {
  std::shared_ptr<Dataset> train;
  Dataset test;
  std::optional<Dataset> ood;
};

SeedData prepare_data(const ExperimentConfig& c, std::uint64_t seed) {
  SeedData out;
  Dataset train = make_dataset(c.data, derive_seed(seed, Stream::kData, 0));
  if (c.data.label_noise > 0.0) train = flip_labels(train, c.data.label_noise, derive_seed(seed, Stream::kData, 3));
  if (c.data.fraction < 1.0) train = subsample(train, c.data.fraction, derive_seed(seed, Stream::kSubsample));
  train.split = Split::kTrain;
  out.train = std::make_shared<Dataset>(std::move(train));
  if (c.data.test) {
    out.test = make_dataset(*c.data.test, derive_seed(seed, Stream::kData, 1));
  } else {
    out.test = make_dataset(c.data, derive_seed(seed, Stream::kData, 1), c.data.test_n);
  }
  out.test.split = Split::kTest;
  if (c.eval.test_corruption) {
    out.test.inputs = corrupt(out.test.inputs, *c.eval.test_corruption, derive_seed(seed, Stream::kCorruption, 1));
  }
  if (c.eval.ood) out.ood = make_dataset(*c.eval.ood, derive_seed(seed, Stream::kData, 2));

  for (const Dataset* d : {out.train.get(), &out.test}) {
    if (d->dim() != c.model.input_dim) {
      throw ConfigError("data '" + d->name + "' has dimension " + std::to_string(d->dim()) + ", model.input_dim is " +
                        std::to_string(c.model.input_dim));
    }
    if (d->num_classes > c.model.output_dim) {
      throw ConfigError("data '" + d->name + "' has " + std::to_string(d->num_classes) + " classes, model.output_dim is " +
                        std::to_string(c.model.output_dim));
    }
  }
  if (out.ood && out.ood->dim() != c.model.input_dim) throw ConfigError("eval.ood: dimension does not match the model");
  return out;
}

ContextDistribution make_context(const ExperimentConfig& c, const SeedData& data, std::uint64_t seed) {
  ContextDistribution dist;
  switch (c.context.kind) {
    case ContextKind::kUniformBox:
      dist = ContextDistribution::uniform_box(c.context.low, c.context.high);
      break;
    case ContextKind::kTrainInputs:
    case ContextKind::kTrainCorrupted:
      dist = ContextDistribution::train_inputs(data.train);
      dist.kind = c.context.kind;
      break;
    case ContextKind::kExternalDataset:
      dist = ContextDistribution::train_inputs(
          std::make_shared<Dataset>(make_dataset(*c.context.source, derive_seed(seed, Stream::kData, 4))));
      dist.kind = ContextKind::kExternalDataset;
      break;
  }
  dist.corruption = c.context.kind == ContextKind::kTrainCorrupted ? c.context.corruption : std::nullopt;
  dist.validate();
  if (dist.dim() != c.model.input_dim) throw ConfigError("context: dimension does not match the model");
  return dist;
}

std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

SeedResult run_seed(const ExperimentConfig& c, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SeedResult r;
  r.seed = seed;
  const SeedData data = prepare_data(c, seed);

  MlpConfig mc = c.model;
  mc.seed = seed;
  const ModelParams init = init_params(mc);
  const FeatureSnapshot phi0 = c.phi0.provenance == SnapshotProvenance::kPretrainedCheckpoint
                                   ? snapshot_feature_params(c.phi0.checkpoint, mc)
                                   : FeatureSnapshot(init, c.phi0.provenance);
  TrainConfig tc = c.train;
  tc.seed = seed;
  const bool function_space = tc.objective != ObjectiveKind::kPsMap;
  std::optional<ContextDistribution> ctx;
  if (function_space) ctx = make_context(c, data, seed);

  TrainResult trained = train(tc, init, *data.train, ctx ? &*ctx : nullptr, function_space ? &phi0 : nullptr, &data.test);
  r.history = std::move(trained.history);
  const ModelParams& model = trained.params;

  const metrics::PredictionSet test_preds{predict_proba(data.test.inputs, model), data.test.labels};
  std::optional<Tensor> ood_probs;
  if (data.ood) ood_probs = predict_proba(data.ood->inputs, model);
  r.report = metrics::evaluate(test_preds, c.eval.m_bins, ood_probs);
  r.train_accuracy = metrics::nll_and_accuracy({predict_proba(data.train->inputs, model), data.train->labels}).second;

  const fs::path dir = c.output_dir / seed_dir_name(seed);
  fs::create_directories(dir);
  r.checkpoint = fs::path(seed_dir_name(seed)) / "model.ckpt";
  save_checkpoint(c.output_dir / r.checkpoint, model);
  if (c.eval.grid) {
    r.entropy_gap = metrics::far_field_entropy_gap([&](const Tensor& x) { return predict_proba(x, model); },
                                                   data.train->inputs, *c.eval.grid);
    r.grid_predictions = fs::path(seed_dir_name(seed)) / "grid.csv";
    emit_grid_predictions(model, *c.eval.grid, c.output_dir / r.grid_predictions);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunResult assemble(const ExperimentConfig& c, std::vector<SeedResult> seeds, const std::string& started,
                   double seconds) {
  RunResult r;
  r.config = c;
  r.seeds = std::move(seeds);
  r.aggregates = aggregate(r.seeds);
  fs::create_directories(c.output_dir);
  r.results_path = c.output_dir / "results.json";
  json j = results_json(r);
  json per_seed = json::object();
  for (const auto& s : r.seeds) per_seed[std::to_string(s.seed)] = s.seconds;
  j["timing"] = {{"started_utc", started}, {"total_seconds", seconds}, {"per_seed_seconds", per_seed}};
  std::ofstream(r.results_path) << j.dump(2) << "\n";
  return r;
}

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config: JSON syntax error at line " + std::to_string(line) + ", column " + std::to_string(col) +
                      ": " + e.what());
  }
  if (root.is_object() && root.contains("schema_version") && root.contains("config")) root = root["config"];

  ExperimentConfig c;
  Reader r(root, "");
  c.name = r.get("name", c.name);

  {
    Reader m = r.child("model");
    c.model.input_dim = m.get<std::uint64_t>("input_dim", c.model.input_dim);
    if (m.has("hidden_widths")) {
      std::vector<std::uint64_t> w;
      read(m.at("hidden_widths"), m.where("hidden_widths"), w);
      c.model.hidden_widths.assign(w.begin(), w.end());
    }
    c.model.output_dim = m.get<std::uint64_t>("output_dim", c.model.output_dim);
    c.model.activation =
        enum_field(m, "activation", [](const std::string& s) { return parse_activation(s); }, c.model.activation);
    c.model.init = enum_field(m, "init", [](const std::string& s) { return parse_init_scheme(s); },
                              default_init(c.model.activation));
    m.finish();
  }

  c.data = *read_data(r.child("data"), base_dir, true);

  if (r.has("context")) {
    Reader x = r.child("context");
    c.context.kind = enum_field(x, "kind", [](const std::string& s) { return parse_context_kind(s); }, c.context.kind);
    c.context.low = x.get("low", c.context.low);
    c.context.high = x.get("high", c.context.high);
    if (x.has("corruption")) c.context.corruption = read_corruption(x.child("corruption"));
    if (x.has("source")) c.context.source = read_data(x.child("source"), base_dir, false);
    x.finish();
  }

  if (r.has("phi0")) {
    Reader p = r.child("phi0");
    c.phi0.provenance =
        enum_field(p, "provenance", [](const std::string& s) { return parse_provenance(s); }, c.phi0.provenance);
    if (p.has("checkpoint")) c.phi0.checkpoint = resolve(p.need<std::string>("checkpoint"), base_dir);
    p.finish();
  }

  {
    Reader t = r.child("train");
    TrainConfig& tc = c.train;
    tc.objective = enum_field(t, "objective", [](const std::string& s) { return parse_objective(s); }, tc.objective);
    tc.lr = t.get("lr", tc.lr);
    tc.momentum = t.get("momentum", tc.momentum);
    tc.cosine_alpha = t.get("cosine_alpha", tc.cosine_alpha);
    tc.epochs = t.get<std::uint64_t>("epochs", tc.epochs);
    tc.batch_size = t.get<std::uint64_t>("batch_size", tc.batch_size);
    tc.likelihood_mc_samples = t.get<std::uint64_t>("likelihood_mc_samples", tc.likelihood_mc_samples);
    tc.n_train = t.get<std::uint64_t>("n_train", tc.n_train);
    tc.regularizer_scaling = enum_field(
        t, "regularizer_scaling", [](const std::string& s) { return parse_regularizer_scaling(s); }, tc.regularizer_scaling);
    tc.phi0_refresh_epochs = t.get<std::uint64_t>("phi0_refresh_epochs", tc.phi0_refresh_epochs);
    t.finish();
  }

  if (r.has("prior")) {
    Reader p = r.child("prior");
    PriorConfig& pc = c.train.prior;
    pc.tau_f = p.get("tau_f", pc.tau_f);
    pc.tau_theta = p.get("tau_theta", pc.tau_theta);
    pc.context_batch_size = p.get<std::uint64_t>("context_batch_size", pc.context_batch_size);
    pc.mc_context_samples = p.get<std::uint64_t>("mc_context_samples", pc.mc_context_samples);
    pc.mc_param_samples = p.get<std::uint64_t>("mc_param_samples", pc.mc_param_samples);
    pc.sigma = p.get("sigma", pc.sigma);
    p.finish();
  }

  if (r.has("eval")) {
    Reader e = r.child("eval");
    c.eval.m_bins = e.get<std::uint64_t>("m_bins", c.eval.m_bins);
    if (e.has("ood")) c.eval.ood = read_data(e.child("ood"), base_dir, false);
    if (e.has("grid")) {
      Reader g = e.child("grid");
      metrics::GridSpec spec;
      spec.low = g.need<std::vector<double>>("low");
      spec.high = g.need<std::vector<double>>("high");
      const auto steps = g.need<std::vector<std::uint64_t>>("steps");
      spec.steps.assign(steps.begin(), steps.end());
      spec.far_radius = g.get("far_radius", spec.far_radius);
      g.finish();
      c.eval.grid = spec;
    }
    if (e.has("test_corruption")) c.eval.test_corruption = read_corruption(e.child("test_corruption"));
    e.finish();
  }

  c.seeds = r.get("seeds", c.seeds);
  if (r.has("output_dir")) c.output_dir = resolve(r.need<std::string>("output_dir"), base_dir);
  r.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(path).parent_path());
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["model"] = {{"input_dim", c.model.input_dim},
                {"hidden_widths", c.model.hidden_widths},
                {"output_dim", c.model.output_dim},
                {"activation", to_string(c.model.activation)},
                {"init", to_string(c.model.init)}};
  j["data"] = data_json(c.data, true);
  json ctx = {{"kind", to_string(c.context.kind)}};
  if (!c.context.low.empty()) ctx["low"] = c.context.low;
  if (!c.context.high.empty()) ctx["high"] = c.context.high;
  if (c.context.corruption) ctx["corruption"] = corruption_json(*c.context.corruption);
  if (c.context.source) ctx["source"] = data_json(*c.context.source, false);
  j["context"] = ctx;
  json phi0 = {{"provenance", to_string(c.phi0.provenance)}};
  if (!c.phi0.checkpoint.empty()) phi0["checkpoint"] = c.phi0.checkpoint.string();
  j["phi0"] = phi0;
  const TrainConfig& t = c.train;
  j["train"] = {{"objective", to_string(t.objective)},
                {"lr", t.lr},
                {"momentum", t.momentum},
                {"cosine_alpha", t.cosine_alpha},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"likelihood_mc_samples", t.likelihood_mc_samples},
                {"n_train", t.n_train},
                {"regularizer_scaling", to_string(t.regularizer_scaling)},
                {"phi0_refresh_epochs", t.phi0_refresh_epochs}};
  const PriorConfig& p = t.prior;
  j["prior"] = {{"tau_f", p.tau_f},
                {"tau_theta", p.tau_theta},
                {"context_batch_size", p.context_batch_size},
                {"mc_context_samples", p.mc_context_samples},
                {"mc_param_samples", p.mc_param_samples},
                {"sigma", p.sigma}};
  json ev = {{"m_bins", c.eval.m_bins}};
  if (c.eval.ood) ev["ood"] = data_json(*c.eval.ood, false);
  if (c.eval.grid) {
    ev["grid"] = {{"low", c.eval.grid->low},
                  {"high", c.eval.grid->high},
                  {"steps", c.eval.grid->steps},
                  {"far_radius", c.eval.grid->far_radius}};
  }
  if (c.eval.test_corruption) ev["test_corruption"] = corruption_json(*c.eval.test_corruption);
  j["eval"] = ev;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir.string();
  return j;
}

std::string config_hash(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

std::vector<std::pair<std::string, double>> scalar_metrics(const SeedResult& r) {
  std::vector<std::pair<std::string, double>> m = {
      {"accuracy", r.report.accuracy},
      {"nll", r.report.nll},
      {"ece", r.report.ece},
      {"sel_pred_auc", r.report.sel_pred_auc},
  };
  if (r.report.ood_auroc) m.emplace_back("ood_auroc", *r.report.ood_auroc);
  m.emplace_back("train_accuracy", r.train_accuracy);
  if (r.entropy_gap) {
    if (r.entropy_gap->mean_entropy_far) m.emplace_back("far_field_entropy", *r.entropy_gap->mean_entropy_far);
    if (r.entropy_gap->mean_entropy_near) m.emplace_back("near_field_entropy", *r.entropy_gap->mean_entropy_near);
  }
  if (!r.history.steps.empty()) m.emplace_back("final_loss", r.history.steps.back().loss.total);
  return m;
}

std::vector<Aggregate> aggregate(const std::vector<SeedResult>& seeds) {
  std::vector<Aggregate> out;
  if (seeds.empty()) return out;
  std::vector<std::map<std::string, double>> per_seed;
  for (const auto& s : seeds) {
    const auto m = scalar_metrics(s);
    per_seed.emplace_back(m.begin(), m.end());
  }
  for (const auto& [name, unused] : scalar_metrics(seeds.front())) {
    (void)unused;
    std::vector<double> v;
    for (const auto& m : per_seed) {
      if (auto it = m.find(name); it != m.end()) v.push_back(it->second);
    }
    if (v.size() != seeds.size()) continue;
    Aggregate a;
    a.metric = name;
    a.n = v.size();
    double sum = 0.0;
    for (double x : v) sum += x;
    a.mean = sum / static_cast<double>(a.n);
    if (a.n >= 2) {
      double ss = 0.0;
      for (double x : v) ss += (x - a.mean) * (x - a.mean);
      a.se = std::sqrt(ss / static_cast<double>(a.n - 1)) / std::sqrt(static_cast<double>(a.n));
    }
    out.push_back(a);
  }
  return out;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("FSEB_WORKERS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return v;
    throw ConfigError(std::string("FSEB_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

json results_json(const RunResult& result) {
  json j;
  j["schema_version"] = kResultsSchemaVersion;
  j["version"] = version_string();
  j["name"] = result.config.name;
  j["config_hash"] = config_hash(result.config);
  j["config"] = to_json(result.config);
  j["se_convention"] = "sample standard deviation (n - 1 denominator) divided by sqrt(n); two seeds give |a - b| / 2";
  json seeds = json::array();
  for (const auto& s : result.seeds) {
    json e;
    e["seed"] = s.seed;
    json m = json::object();
    for (const auto& [k, v] : scalar_metrics(s)) m[k] = v;
    e["metrics"] = m;
    json bins = json::array();
    for (const auto& b : s.report.bin_table) {
      bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}, {"confidence", b.confidence},
                      {"accuracy", b.accuracy}});
    }
    e["bin_table"] = bins;
    json curve = json::array();
    for (const auto& p : s.report.curve_points) curve.push_back({{"coverage", p.coverage}, {"accuracy", p.accuracy}});
    e["selective_curve"] = curve;
    if (s.entropy_gap) {
      json g = {{"far_count", s.entropy_gap->far_count}, {"near_count", s.entropy_gap->near_count}};
      g["mean_entropy_far"] = s.entropy_gap->mean_entropy_far ? json(*s.entropy_gap->mean_entropy_far) : json(nullptr);
      g["mean_entropy_near"] = s.entropy_gap->mean_entropy_near ? json(*s.entropy_gap->mean_entropy_near) : json(nullptr);
      e["entropy_gap"] = g;
    }
    json h;
    h["epochs"] = s.history.epochs.size();
    h["steps"] = s.history.steps.size();
    if (!s.history.steps.empty()) {
      const LossBreakdown& f = s.history.steps.back().loss;
      h["final_loss"] = {{"data_nll", f.data_nll}, {"function_penalty", f.function_penalty},
                         {"param_penalty", f.param_penalty}, {"total", f.total}};
    }
    json losses = json::array(), val_acc = json::array();
    for (const auto& ep : s.history.epochs) {
      losses.push_back(ep.mean_loss);
      if (ep.val_accuracy) val_acc.push_back(*ep.val_accuracy);
    }
    h["epoch_mean_loss"] = losses;
    h["epoch_val_accuracy"] = val_acc;
    e["history"] = h;
    json art = {{"checkpoint", s.checkpoint.generic_string()}};
    if (!s.grid_predictions.empty()) art["grid_predictions"] = s.grid_predictions.generic_string();
    e["artifacts"] = art;
    seeds.push_back(e);
  }
  j["seeds"] = seeds;
  json agg = json::object();
  for (const auto& a : result.aggregates) {
    json e = {{"mean", a.mean}, {"n", a.n}};
    if (a.se) e["se"] = *a.se;
    agg[a.metric] = e;
  }
  j["aggregate"] = agg;
  return j;
}

RunResult run(const ExperimentConfig& config, std::size_t workers) {
  validate(config);
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SeedResult> seeds(config.seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t i) { seeds[i] = run_seed(config, config.seeds[i]); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return assemble(config, std::move(seeds), started, secs);
}

void emit_grid_predictions(const ModelParams& model, const metrics::GridSpec& grid, const fs::path& out_path) {
  const Tensor pts = grid.points();
  if (pts.cols() != model.config.input_dim) {
    throw ConfigError("grid: dimension " + std::to_string(pts.cols()) + " does not match model input_dim " +
                      std::to_string(model.config.input_dim));
  }
  const Tensor probs = predict_proba(pts, model);
  const auto entropy = metrics::predictive_entropy(probs);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path);
  if (!out) throw DataError("grid: cannot write " + out_path.string());
  for (std::size_t j = 0; j < pts.cols(); ++j) out << "x" << j << ",";
  for (std::size_t k = 0; k < probs.cols(); ++k) out << "p_class" << k << ",";
  out << "entropy\n";
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    for (std::size_t j = 0; j < pts.cols(); ++j) out << fmt(pts(i, j)) << ",";
    for (std::size_t k = 0; k < probs.cols(); ++k) out << fmt(probs(i, k)) << ",";
    out << fmt(entropy[i]) << "\n";
  }
}

const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kContextBatchSize: return "context-batch-size";
    case AblationAxis::kContextDistribution: return "context-distribution";
    case AblationAxis::kDataFraction: return "data-fraction";
    case AblationAxis::kCorruptionLevel: return "corruption-level";
  }
  return "unknown";
}

AblationAxis parse_axis(const std::string& s) {
  for (auto a : {AblationAxis::kContextBatchSize, AblationAxis::kContextDistribution, AblationAxis::kDataFraction,
                 AblationAxis::kCorruptionLevel}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown ablation axis '" + s +
                    "' (context-batch-size, context-distribution, data-fraction, corruption-level)");
}

ExperimentConfig with_axis(const ExperimentConfig& base, AblationAxis axis, const std::string& value) {
  ExperimentConfig c = base;
  auto number = [&](bool integral) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || (integral && (v != std::floor(v) || v < 0))) {
      throw ConfigError(std::string("ablation value '") + value + "' is not valid for axis " + to_string(axis));
    }
    return v;
  };
  switch (axis) {
    case AblationAxis::kContextBatchSize:
      c.train.prior.context_batch_size = static_cast<std::size_t>(number(true));
      break;
    case AblationAxis::kContextDistribution:
      c.context.kind = parse_context_kind(value);
      break;
    case AblationAxis::kDataFraction:
      c.data.fraction = number(false);
      if (!(c.data.fraction > 0.0 && c.data.fraction <= 1.0)) throw ConfigError("data-fraction values must be in (0, 1]");
      break;
    case AblationAxis::kCorruptionLevel: {
      const int level = static_cast<int>(number(true));
      if (level == 0) {
        c.eval.test_corruption.reset();
      } else {
        if (level > 5) throw ConfigError("corruption-level values must be in 0..5");
        CorruptionSpec spec = c.eval.test_corruption.value_or(CorruptionSpec::standard(CorruptionKind::kGaussianNoise, 1));
        spec.level = level;
        c.eval.test_corruption = spec;
      }
      break;
    }
  }
  c.output_dir = base.output_dir / (std::string(to_string(axis)) + "=" + value);
  validate(c);
  return c;
}

AblationResult ablate(const ExperimentConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                      std::size_t workers) {
  if (values.empty()) throw ConfigError("ablate: no values given");
  AblationResult out;
  out.axis = axis;
  out.values = values;
  std::vector<ExperimentConfig> cells;
  for (const auto& v : values) cells.push_back(with_axis(base, axis, v));

  struct Task {
    std::size_t cell, seed;
  };
  std::vector<Task> tasks;
  std::vector<std::vector<SeedResult>> results(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    results[c].resize(cells[c].seeds.size());
    for (std::size_t s = 0; s < cells[c].seeds.size(); ++s) tasks.push_back({c, s});
  }
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const Task t = tasks[i];
    results[t.cell][t.seed] = run_seed(cells[t.cell], cells[t.cell].seeds[t.seed]);
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (std::size_t c = 0; c < cells.size(); ++c) out.cells.push_back(assemble(cells[c], std::move(results[c]), started, secs));

  std::vector<std::string> metric_names;
  for (const auto& a : out.cells.front().aggregates) {
    bool everywhere = true;
    for (const auto& cell : out.cells) {
      bool found = false;
      for (const auto& b : cell.aggregates) found |= b.metric == a.metric;
      everywhere &= found;
    }
    if (everywhere) metric_names.push_back(a.metric);
  }
  fs::create_directories(base.output_dir);
  out.table_path = base.output_dir / (std::string("ablation_") + to_string(axis) + ".csv");
  std::ofstream csv(out.table_path);
  csv << to_string(axis);
  for (const auto& m : metric_names) csv << "," << m << "_mean," << m << "_se";
  csv << "\n";
  for (std::size_t c = 0; c < out.cells.size(); ++c) {
    csv << values[c];
    for (const auto& m : metric_names) {
      for (const auto& a : out.cells[c].aggregates) {
        if (a.metric != m) continue;
        csv << "," << fmt(a.mean) << "," << (a.se ? fmt(*a.se) : "");
      }
    }
    csv << "\n";
  }
  return out;
}

Comparison compare(const std::vector<fs::path>& results_paths) {
  if (results_paths.empty()) throw ConfigError("compare: no results files given");
  struct Entry {
    std::string label;
    std::map<std::string, std::pair<double, std::optional<double>>> metrics;
  };
  std::vector<Entry> entries;
  std::vector<std::string> order;
  for (const auto& p : results_paths) {
    std::ifstream in(p);
    if (!in) throw DataError("compare: cannot open " + p.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError("compare: " + p.string() + " is not valid JSON: " + e.what());
    }
    if (!j.contains("aggregate") || !j["aggregate"].is_object()) {
      throw DataError("compare: " + p.string() + " has no aggregate block");
    }
    Entry e;
    e.label = j.value("name", std::string("run")) + " [" + p.string() + "]";
    for (auto it = j["aggregate"].begin(); it != j["aggregate"].end(); ++it) {
      const json& a = it.value();
      std::optional<double> se;
      if (a.contains("se")) se = a["se"].get<double>();
      e.metrics[it.key()] = {a.at("mean").get<double>(), se};
      if (std::find(order.begin(), order.end(), it.key()) == order.end()) order.push_back(it.key());
    }
    entries.push_back(std::move(e));
  }

  auto cell = [](const std::pair<double, std::optional<double>>& v) {
    return v.second ? fmt(v.first, "%.4f") + " ± " + fmt(*v.second, "%.4f") : fmt(v.first, "%.4f");
  };
  std::ostringstream md, csv;
  md << "| metric";
  for (const auto& e : entries) md << " | " << e.label;
  for (std::size_t i = 1; i < entries.size(); ++i) md << " | Δ " << entries[i].label;
  md << " |\n|---";
  for (std::size_t i = 0; i < 2 * entries.size() - 1; ++i) md << "|---";
  md << "|\n";
  csv << "metric,run,mean,se,delta_vs_first\n";
  for (const auto& m : order) {
    md << "| " << m;
    const auto* first = entries.front().metrics.count(m) ? &entries.front().metrics.at(m) : nullptr;
    for (const auto& e : entries) {
      auto it = e.metrics.find(m);
      md << " | " << (it == e.metrics.end() ? std::string("n/a") : cell(it->second));
    }
    for (std::size_t i = 1; i < entries.size(); ++i) {
      auto it = entries[i].metrics.find(m);
      md << " | " << (it == entries[i].metrics.end() || !first ? std::string("n/a") : fmt(it->second.first - first->first, "%+.4f"));
    }
    md << " |\n";
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto it = entries[i].metrics.find(m);
      if (it == entries[i].metrics.end()) continue;
      std::string label = entries[i].label;
      for (auto& ch : label)
        if (ch == ',' || ch == '"') ch = ';';
      csv << m << ",\"" << label << "\"," << fmt(it->second.first) << ","
          << (it->second.second ? fmt(*it->second.second) : "") << ","
          << (i == 0 || !first ? "" : fmt(it->second.first - first->first)) << "\n";
    }
  }
  return {md.str(), csv.str()};
}

}  // namespace fseb::experiment
