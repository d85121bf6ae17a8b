#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fseb/tensor.hpp"

namespace fseb {

enum class Split { kTrain, kTest };

struct Dataset {
  Tensor inputs{Shape{0, 0}};  // N x D
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string name;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.rank() == 2 ? inputs.shape()[1] : 0; }
  /// Throws DataError if labels and inputs disagree or a label is out of range.
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

struct Batch {
  Tensor inputs;
  std::vector<std::size_t> labels;
  std::size_t size() const { return labels.size(); }
};

Batch gather(const Dataset& data, const std::vector<std::size_t>& indices);
Batch full_batch(const Dataset& data);

/// Interleaved half circles: class 0 on the upper unit semicircle centred at
/// the origin, class 1 on the lower one centred at (1, 0.5). n/2 points per
/// class at evenly spaced angles, plus isotropic Gaussian noise, shuffled.
Dataset gen_two_moons(std::size_t n, double noise_sd, std::uint64_t seed);

/// Point i belongs to class i mod centers.size(); rows are shuffled.
Dataset gen_gaussian_blobs(std::size_t n, const std::vector<std::vector<double>>& centers, double sd,
                           std::uint64_t seed);

/// Replaces each label, with probability `fraction`, by a uniformly drawn
/// different class.
Dataset flip_labels(const Dataset& data, double fraction, std::uint64_t seed);

/// Seeded subset of round(fraction * N) rows (at least one), order preserved.
Dataset subsample(const Dataset& data, double fraction, std::uint64_t seed);

enum class TabularFormat { kCsvLabeled, kIdxPair };

/// csv-labeled: header `x0,...,x{D-1},label`, one row per example, values
/// taken verbatim. idx-pair: `path` is the image file (magic 0x00000803) and
/// `labels_path` the label file (magic 0x00000801); bytes are scaled to
/// [0, 1]. num_classes = 0 infers max label + 1.
Dataset load_tabular(const std::filesystem::path& path, TabularFormat format,
                     const std::filesystem::path& labels_path = {}, std::size_t num_classes = 0);

void save_csv(const std::filesystem::path& path, const Dataset& data);

enum class CorruptionKind { kGaussianNoise, kRandomErasure };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int level = 1;  // 1..5
  std::array<double, 5> magnitudes{};

  static CorruptionSpec standard(CorruptionKind kind, int level);
  double magnitude() const { return magnitudes.at(static_cast<std::size_t>(level - 1)); }
  /// Level in 1..5 and magnitudes strictly increasing.
  void validate() const;
};

const char* to_string(CorruptionKind k);
CorruptionKind parse_corruption_kind(const std::string& s);

/// gaussian-noise adds N(0, m^2) per coordinate; random-erasure zeroes each
/// coordinate independently with probability m.
Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, std::uint64_t seed);

enum class ContextKind { kTrainInputs, kTrainCorrupted, kExternalDataset, kUniformBox };
const char* to_string(ContextKind k);
ContextKind parse_context_kind(const std::string& s);

struct ContextDistribution {
  ContextKind kind = ContextKind::kUniformBox;
  std::shared_ptr<const Dataset> source;
  std::vector<double> low;
  std::vector<double> high;
  std::optional<CorruptionSpec> corruption;

  void validate() const;
  std::size_t dim() const;

  static ContextDistribution train_inputs(std::shared_ptr<const Dataset> source);
  static ContextDistribution uniform_box(std::vector<double> low, std::vector<double> high);
};

/// M x D context batch. Dataset-backed kinds draw without replacement while
/// m <= source size and with replacement beyond; corruption, if configured,
/// is applied after the draw.
Tensor sample_context(const ContextDistribution& dist, std::size_t m, std::uint64_t seed);

/// Seeded permutation split into consecutive chunks of batch_size; the last
/// chunk may be shorter.
std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

}  // namespace fseb
