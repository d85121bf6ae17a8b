#pragma once

// Configuration-driven experiment runner.
//
// A JSON config names the model, data, context distribution, phi0 source,
// training and prior settings, evaluation options, seeds and output
// directory. Every random choice in a seed's run derives from that seed.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fseb/data.hpp"
#include "fseb/metrics.hpp"
#include "fseb/model.hpp"
#include "fseb/training.hpp"

#include "json.hpp"

namespace fseb::experiment {

inline constexpr int kResultsSchemaVersion = 1;

/// git-describe-style string fixed at configure time.
const char* version_string();

struct DataSpec {
  std::string kind = "two-moons";  // two-moons | blobs | csv | idx
  std::size_t n = 500;
  double noise = 0.1;
  std::vector<std::vector<double>> centers;
  double sd = 0.5;
  std::filesystem::path path;
  std::filesystem::path labels_path;
  std::size_t num_classes = 0;
  // Training-set options.
  double fraction = 1.0;
  double label_noise = 0.0;
  std::size_t test_n = 0;  // synthetic test size; 0: same as n
  std::shared_ptr<const DataSpec> test;
};

struct ContextSpec {
  ContextKind kind = ContextKind::kUniformBox;
  std::vector<double> low;
  std::vector<double> high;
  std::optional<CorruptionSpec> corruption;
  std::shared_ptr<const DataSpec> source;  // external-dataset
};

struct Phi0Spec {
  SnapshotProvenance provenance = SnapshotProvenance::kRandomInit;
  std::filesystem::path checkpoint;
};

struct EvalSpec {
  std::size_t m_bins = 15;
  std::shared_ptr<const DataSpec> ood;
  std::optional<metrics::GridSpec> grid;
  std::optional<CorruptionSpec> test_corruption;
};

struct ExperimentConfig {
  std::string name = "experiment";
  MlpConfig model;
  DataSpec data;
  ContextSpec context;
  Phi0Spec phi0;
  TrainConfig train;
  EvalSpec eval;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "out";
};

/// Parses a config (or the "config" block of a results file). Relative paths
/// resolve against `base_dir`. Throws ConfigError naming the line or field.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved form; parse_config(to_json(c)) reproduces c.
nlohmann::json to_json(const ExperimentConfig& config);
/// FNV-1a over the resolved config with output_dir removed, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

struct SeedResult {
  std::uint64_t seed = 0;
  metrics::MetricsReport report;
  double train_accuracy = 0.0;
  std::optional<metrics::EntropyGap> entropy_gap;
  TrainHistory history;
  std::filesystem::path checkpoint;
  std::filesystem::path grid_predictions;
  double seconds = 0.0;
};

struct Aggregate {
  std::string metric;
  double mean = 0.0;
  std::optional<double> se;  // sample sd / sqrt(n); omitted for one seed
  std::size_t n = 0;
};

struct RunResult {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;
  std::vector<Aggregate> aggregates;
  std::filesystem::path results_path;
};

/// Named scalar metrics of one seed, in a fixed order.
std::vector<std::pair<std::string, double>> scalar_metrics(const SeedResult& r);
std::vector<Aggregate> aggregate(const std::vector<SeedResult>& seeds);

/// Worker count from FSEB_WORKERS, default 1.
std::size_t worker_count();

/// Trains and evaluates every seed, writes output_dir/results.json plus a
/// checkpoint (and grid CSV if configured) per seed. TrainingAborted
/// propagates.
RunResult run(const ExperimentConfig& config, std::size_t workers = worker_count());

nlohmann::json results_json(const RunResult& result);

/// CSV rows `x0,x1,...,p_class0,...,entropy` over the grid points.
void emit_grid_predictions(const ModelParams& model, const metrics::GridSpec& grid,
                           const std::filesystem::path& out_path);

enum class AblationAxis { kContextBatchSize, kContextDistribution, kDataFraction, kCorruptionLevel };
const char* to_string(AblationAxis a);
AblationAxis parse_axis(const std::string& s);

/// Config with one axis set to `value`. corruption-level sets the level of
/// eval.test_corruption (gaussian-noise if none was configured).
ExperimentConfig with_axis(const ExperimentConfig& base, AblationAxis axis, const std::string& value);

struct AblationResult {
  AblationAxis axis;
  std::vector<std::string> values;
  std::vector<RunResult> cells;
  std::filesystem::path table_path;
};

/// One run per value under output_dir/<axis>=<value>, all (cell, seed)
/// pairs sharing the worker pool; writes output_dir/ablation_<axis>.csv.
AblationResult ablate(const ExperimentConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                      std::size_t workers = worker_count());

struct Comparison {
  std::string markdown;
  std::string csv;
};

/// Per-metric mean ± se per results file; later files get delta columns
/// against the first.
Comparison compare(const std::vector<std::filesystem::path>& results_paths);

}  // namespace fseb::experiment
