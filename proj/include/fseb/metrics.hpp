#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "fseb/tensor.hpp"

namespace fseb::metrics {

struct PredictionSet {
  Tensor probabilities;              // N x K, rows sum to 1
  std::vector<std::size_t> labels;   // empty for OOD-only sets

  std::size_t size() const { return probabilities.rank() == 2 ? probabilities.shape()[0] : 0; }
  std::size_t num_classes() const { return probabilities.rank() == 2 ? probabilities.shape()[1] : 0; }
  /// Rows nonnegative and summing to 1 within 1e-9; labels, if present, match.
  void validate(bool require_labels) const;
};

struct BinStat {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;
  double accuracy = 0.0;
};

struct CurvePoint {
  double coverage = 0.0;
  double accuracy = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  double sel_pred_auc = 0.0;
  std::optional<double> ood_auroc;
  std::vector<BinStat> bin_table;
  std::vector<CurvePoint> curve_points;
};

/// Mean -log p(y_true) and argmax accuracy (ties go to the lowest index).
std::pair<double, double> nll_and_accuracy(const PredictionSet& preds);

/// Index of the largest probability in row i; lowest index on ties.
std::size_t argmax_row(const Tensor& probs, std::size_t i);

/// Equal-width bins over (0, 1] with right-closed edges on the maximum
/// probability; ECE = sum_b (|B_b| / n) |acc(B_b) - conf(B_b)|.
double ece(const PredictionSet& preds, std::size_t m_bins = 15);
std::vector<BinStat> ece_bins(const PredictionSet& preds, std::size_t m_bins = 15);

/// -sum_k p log p per row, natural log, 0 log 0 = 0.
std::vector<double> predictive_entropy(const Tensor& probabilities);

/// Coverage sweep over c = 1/N, 2/N, ..., 1 keeping the highest max-prob
/// samples (ties broken by index); AUC is the mean accuracy over the grid.
std::pair<std::vector<CurvePoint>, double> selective_curve_and_auc(const PredictionSet& preds);

/// P(entropy_out > entropy_in) + 0.5 P(equal), via the rank-sum statistic.
double auroc_from_entropy(const std::vector<double>& entropy_in, const std::vector<double>& entropy_out);

MetricsReport evaluate(const PredictionSet& preds, std::size_t m_bins = 15,
                       const std::optional<Tensor>& ood_probabilities = std::nullopt);

/// Regular grid over a D-dimensional box; steps[j] >= 1 points per axis
/// (a single point sits at the low edge).
struct GridSpec {
  std::vector<double> low;
  std::vector<double> high;
  std::vector<std::size_t> steps;
  double far_radius = 1.5;

  void validate() const;
  /// Points in row-major order (last axis fastest).
  Tensor points() const;
};

struct EntropyGap {
  std::optional<double> mean_entropy_far;
  std::optional<double> mean_entropy_near;
  std::size_t far_count = 0;
  std::size_t near_count = 0;
};

using ProbabilityFn = std::function<Tensor(const Tensor&)>;

/// Mean predictive entropy over grid points farther than far_radius from
/// every training input ("far") versus the rest ("near").
EntropyGap far_field_entropy_gap(const ProbabilityFn& model, const Tensor& train_inputs, const GridSpec& grid);

}  // namespace fseb::metrics
