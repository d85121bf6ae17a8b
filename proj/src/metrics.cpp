#include "fseb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace fseb::metrics {

void PredictionSet::validate(bool require_labels) const {
  if (probabilities.rank() != 2) throw ShapeError("predictions: probabilities must be N x K");
  const std::size_t n = size(), k = num_classes();
  if (k == 0) throw ShapeError("predictions: zero classes");
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probabilities(i, j);
      if (!(p >= 0.0)) throw NumericalError("predictions: negative or NaN probability at row " + std::to_string(i));
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw NumericalError("predictions: row " + std::to_string(i) + " does not sum to 1");
  }
  if (require_labels && labels.size() != n) {
    throw ShapeError("predictions: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw DataError("predictions: label out of range at row " + std::to_string(i));
  }
}

std::size_t argmax_row(const Tensor& probs, std::size_t i) {
  const std::size_t k = probs.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (probs(i, j) > probs(i, best)) best = j;
  return best;
}

std::pair<double, double> nll_and_accuracy(const PredictionSet& preds) {
  preds.validate(true);
  const std::size_t n = preds.size();
  if (n == 0) throw ConfigError("nll_and_accuracy: empty prediction set");
  double nll = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    nll -= std::log(preds.probabilities(i, preds.labels[i]));
    correct += argmax_row(preds.probabilities, i) == preds.labels[i];
  }
  return {nll / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

std::vector<BinStat> ece_bins(const PredictionSet& preds, std::size_t m_bins) {
  if (m_bins == 0) throw ConfigError("ece: m_bins must be >= 1");
  preds.validate(true);
  std::vector<BinStat> bins(m_bins);
  std::vector<double> conf_sum(m_bins, 0.0);
  std::vector<std::size_t> correct(m_bins, 0);
  for (std::size_t b = 0; b < m_bins; ++b) {
    bins[b].lower = static_cast<double>(b) / static_cast<double>(m_bins);
    bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(m_bins);
  }
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::size_t pred = argmax_row(preds.probabilities, i);
    const double conf = preds.probabilities(i, pred);
    // Right-closed bins (b/m, (b+1)/m]: index = ceil(conf * m) - 1.
    auto b = static_cast<std::ptrdiff_t>(std::ceil(conf * static_cast<double>(m_bins))) - 1;
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(m_bins) - 1);
    // Settle rounding at the edges against the stored bin bounds.
    while (b > 0 && conf <= bins[static_cast<std::size_t>(b)].lower) --b;
    while (b + 1 < static_cast<std::ptrdiff_t>(m_bins) && conf > bins[static_cast<std::size_t>(b)].upper) ++b;
    const auto ub = static_cast<std::size_t>(b);
    bins[ub].count += 1;
    conf_sum[ub] += conf;
    correct[ub] += pred == preds.labels[i];
  }
  for (std::size_t b = 0; b < m_bins; ++b) {
    if (bins[b].count == 0) continue;
    const double c = static_cast<double>(bins[b].count);
    bins[b].confidence = conf_sum[b] / c;
    bins[b].accuracy = static_cast<double>(correct[b]) / c;
  }
  return bins;
}

double ece(const PredictionSet& preds, std::size_t m_bins) {
  const auto bins = ece_bins(preds, m_bins);
  const double n = static_cast<double>(preds.size());
  if (n == 0) return 0.0;
  double e = 0.0;
  for (const auto& b : bins) {
    if (b.count) e += static_cast<double>(b.count) / n * std::abs(b.accuracy - b.confidence);
  }
  return e;
}

std::vector<double> predictive_entropy(const Tensor& probabilities) {
  const std::size_t n = probabilities.rows(), k = probabilities.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probabilities(i, j);
      if (p > 0.0) h -= p * std::log(p);
    }
    out[i] = h;
  }
  return out;
}

std::pair<std::vector<CurvePoint>, double> selective_curve_and_auc(const PredictionSet& preds) {
  preds.validate(true);
  const std::size_t n = preds.size();
  if (n == 0) throw ConfigError("selective prediction: empty prediction set");
  std::vector<double> score(n);
  std::vector<bool> hit(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pred = argmax_row(preds.probabilities, i);
    score[i] = preds.probabilities(i, pred);
    hit[i] = pred == preds.labels[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  std::vector<CurvePoint> curve;
  curve.reserve(n);
  std::size_t correct = 0;
  double auc = 0.0;
  for (std::size_t kept = 1; kept <= n; ++kept) {
    correct += hit[order[kept - 1]];
    const double acc = static_cast<double>(correct) / static_cast<double>(kept);
    curve.push_back({static_cast<double>(kept) / static_cast<double>(n), acc});
    auc += acc;
  }
  return {std::move(curve), auc / static_cast<double>(n)};
}

double auroc_from_entropy(const std::vector<double>& entropy_in, const std::vector<double>& entropy_out) {
  if (entropy_in.empty() || entropy_out.empty()) throw ConfigError("auroc: both sets must be non-empty");
  // Midranks over the pooled sample; U_out = R_out - n_out (n_out + 1) / 2.
  struct Item {
    double value;
    bool out;
  };
  std::vector<Item> pooled;
  pooled.reserve(entropy_in.size() + entropy_out.size());
  for (double v : entropy_in) pooled.push_back({v, false});
  for (double v : entropy_out) pooled.push_back({v, true});
  std::sort(pooled.begin(), pooled.end(), [](const Item& a, const Item& b) { return a.value < b.value; });
  double rank_sum_out = 0.0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].value == pooled[i].value) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].out) rank_sum_out += midrank;
    i = j;
  }
  const double n_out = static_cast<double>(entropy_out.size());
  const double n_in = static_cast<double>(entropy_in.size());
  const double u = rank_sum_out - n_out * (n_out + 1.0) / 2.0;
  return u / (n_in * n_out);
}

MetricsReport evaluate(const PredictionSet& preds, std::size_t m_bins, const std::optional<Tensor>& ood_probabilities) {
  MetricsReport r;
  std::tie(r.nll, r.accuracy) = nll_and_accuracy(preds);
  r.bin_table = ece_bins(preds, m_bins);
  r.ece = ece(preds, m_bins);
  std::tie(r.curve_points, r.sel_pred_auc) = selective_curve_and_auc(preds);
  if (ood_probabilities) {
    PredictionSet ood{*ood_probabilities, {}};
    ood.validate(false);
    r.ood_auroc = auroc_from_entropy(predictive_entropy(preds.probabilities), predictive_entropy(*ood_probabilities));
  }
  return r;
}

void GridSpec::validate() const {
  if (low.empty() || low.size() != high.size() || low.size() != steps.size()) {
    throw ConfigError("grid: low, high and steps must be non-empty and equal length");
  }
  for (std::size_t j = 0; j < low.size(); ++j) {
    if (steps[j] == 0) throw ConfigError("grid: steps must be >= 1");
    if (!(low[j] <= high[j])) throw ConfigError("grid: need low <= high");
  }
  if (!(far_radius >= 0.0)) throw ConfigError("grid: far_radius must be >= 0");
}

Tensor GridSpec::points() const {
  validate();
  const std::size_t d = low.size();
  std::size_t total = 1;
  for (auto s : steps) total *= s;
  Tensor out({total, d});
  for (std::size_t p = 0; p < total; ++p) {
    std::size_t rem = p;
    for (std::size_t jj = d; jj-- > 0;) {
      const std::size_t idx = rem % steps[jj];
      rem /= steps[jj];
      const double frac = steps[jj] == 1 ? 0.0 : static_cast<double>(idx) / static_cast<double>(steps[jj] - 1);
      out(p, jj) = low[jj] + frac * (high[jj] - low[jj]);
    }
  }
  return out;
}

EntropyGap far_field_entropy_gap(const ProbabilityFn& model, const Tensor& train_inputs, const GridSpec& grid) {
  const Tensor pts = grid.points();
  const std::size_t d = pts.cols();
  if (train_inputs.rank() != 2 || train_inputs.cols() != d) {
    throw ShapeError("far_field_entropy_gap: train inputs " + shape_string(train_inputs.shape()) +
                     " vs grid dimension " + std::to_string(d));
  }
  const auto entropy = predictive_entropy(model(pts));
  const double r2 = grid.far_radius * grid.far_radius;
  EntropyGap gap;
  double far_sum = 0.0, near_sum = 0.0;
  for (std::size_t p = 0; p < pts.rows(); ++p) {
    bool far = true;
    for (std::size_t i = 0; i < train_inputs.rows() && far; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = pts(p, j) - train_inputs(i, j);
        s += diff * diff;
      }
      if (s <= r2) far = false;
    }
    if (far) {
      far_sum += entropy[p];
      ++gap.far_count;
    } else {
      near_sum += entropy[p];
      ++gap.near_count;
    }
  }
  if (gap.far_count) gap.mean_entropy_far = far_sum / static_cast<double>(gap.far_count);
  if (gap.near_count) gap.mean_entropy_near = near_sum / static_cast<double>(gap.near_count);
  return gap;
}

}  // namespace fseb::metrics
