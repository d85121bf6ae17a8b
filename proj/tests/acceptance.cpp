// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fseb/experiment.hpp"
#include "fseb/fsmap.hpp"
#include "fseb/function_prior.hpp"
#include "fseb/training.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace fseb;
using namespace fseb::testing;
namespace ex = fseb::experiment;
namespace fm = fseb::fsmap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Batch random_batch(std::size_t b, std::mt19937_64& rng) {
  Batch out{random_tensor({b, 2}, rng), {}};
  for (std::size_t i = 0; i < b; ++i) out.labels.push_back(rng() % 2);
  return out;
}

PriorConfig prior(double tau_f, double tau_theta, std::size_t m = 6) {
  PriorConfig c;
  c.tau_f = tau_f;
  c.tau_theta = tau_theta;
  c.context_batch_size = m;
  return c;
}

PredictionSet random_set(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  Tensor z = random_tensor({n, k}, rng, 2.0);
  Tensor p({n, k});
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(z(i, c));
    for (std::size_t c = 0; c < k; ++c) p(i, c) = std::exp(z(i, c)) / s;
    labels.push_back(rng() % k);
  }
  // A few duplicated rows so score ties occur.
  for (std::size_t i = 0; i + 1 < n && i < 6; i += 2)
    for (std::size_t c = 0; c < k; ++c) p(i + 1, c) = p(i, c);
  return {p, labels};
}

Tensor gram(const Tensor& j) {
  Tensor g({j.cols(), j.cols()});
  for (std::size_t a = 0; a < j.cols(); ++a)
    for (std::size_t b = 0; b < j.cols(); ++b) {
      double s = 0.0;
      for (std::size_t r = 0; r < j.rows(); ++r) s += j(r, a) * j(r, b);
      g(a, b) = s;
    }
  return g;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fseb_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ex::ExperimentConfig config(const std::string& file, const fs::path& out) {
  ex::ExperimentConfig c = ex::load_config(fs::path(FSEB_SOURCE_DIR) / "configs" / file);
  c.output_dir = out;
  return c;
}

double seed_metric(const ex::SeedResult& r, const std::string& name) {
  for (const auto& [k, v] : ex::scalar_metrics(r))
    if (k == name) return v;
  return std::nan("");
}

double aggregate_of(const ex::RunResult& r, const std::string& name) {
  for (const auto& a : r.aggregates)
    if (a.metric == name) return a.mean;
  return std::nan("");
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const MlpConfig c = tiny_config({8, 4}, 2, 2);
  double worst = 0.0;
  std::string worst_name;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ModelParams p = random_params(c, s);
    const FeatureSnapshot phi0 = snapshot_feature_params(random_params(c, 1000 + s));
    std::mt19937_64 rng(s);
    const Batch b = random_batch(10, rng);
    const Tensor x_hat = random_tensor({6, 2}, rng, 1.5);
    const std::vector<Tensor> ctx{x_hat};
    const PriorConfig cfg = prior(3.0, 0.1);

    using LossFn = std::function<LossResult(const ModelParams&)>;
    const std::vector<std::pair<std::string, LossFn>> losses{
        {"ps_map_loss", [&](const ModelParams& q) { return ps_map_loss(b, q, 0.1, 100); }},
        {"eb_map_loss", [&](const ModelParams& q) { return eb_map_loss(b, q, x_hat, phi0, cfg, 100); }},
        {"eb_vi_loss", [&](const ModelParams& q) { return eb_vi_loss(b, q, ctx, phi0, cfg, 1, 100, s); }},
        {"eb_regularizer",
         [&](const ModelParams& q) {
           ad::Tape tape;
           const RegularizerTerms t = eb_regularizer(bind_params(tape, q), x_hat, phi0, cfg);
           const double v = t.value.value().item();
           return LossResult{{0.0, 0.0, 0.0, v}, tape.backward(t.value)};
         }},
    };
    for (const auto& [name, fn] : losses) {
      const ad::Gradients g = fn(p).grads;
      auto value = [&](const std::map<std::string, Tensor>& t) { return fn(ModelParams::from_named(c, t)).value(); };
      const double err = ad::max_relative_error(g, ad::finite_difference_grad(value, p.named(), 1e-5));
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 60.0,
          fmt("max relative error %.2e", worst) + " (" + worst_name + "), " + fmt("%.1f s", secs)};
}

Outcome oracle_equivalence() {
  double worst_quad = 0.0, worst_kernel = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 rng(s);
    const std::size_t m = 1 + s % 32, d = 1 + rng() % 8;
    const Tensor h = random_tensor({m, d}, rng);
    const Tensor v = random_tensor({m}, rng);
    const ContextKernel k = build_kernel(h);
    worst_kernel = std::max(worst_kernel, max_abs_diff(k.matrix, oracle_gram_plus_identity(h)));
    worst_quad = std::max(worst_quad, rel_diff(mahalanobis_sq(v.values(), k),
                                               oracle_quad(oracle_gram_plus_identity(h), v.values())));
  }
  return {worst_quad < 1e-8 && worst_kernel < 1e-12,
          fmt("mahalanobis rel %.2e, kernel abs %.2e over 100 kernels", worst_quad, worst_kernel)};
}

Outcome reduction_chain() {
  double worst = 0.0;
  std::size_t bit_exact = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const MlpConfig c = tiny_config({8, 4}, 2, 2);
    const ModelParams p = random_params(c, s);
    const FeatureSnapshot phi0 = snapshot_feature_params(random_params(c, 500 + s));
    std::mt19937_64 rng(s);
    const Batch b = random_batch(12, rng);
    const Tensor x_hat = random_tensor({7, 2}, rng);
    const double tau_theta = 0.05 + 0.01 * static_cast<double>(s);
    const double eb0 = eb_map_loss(b, p, x_hat, phi0, prior(0.0, tau_theta), 200).value();
    worst = std::max(worst, std::abs(eb0 - ps_map_loss(b, p, tau_theta, 200).value()));
    const PriorConfig cfg = prior(4.0, tau_theta);
    const std::vector<Tensor> ctx{x_hat};
    const LossResult map = eb_map_loss(b, p, x_hat, phi0, cfg, 200);
    const LossResult vi = eb_vi_loss(b, p, ctx, phi0, cfg, 1, 200, s);
    bool same = map.value() == vi.value();
    for (const auto& [name, g] : map.grads.entries()) same = same && g == vi.grads.at(name);
    bit_exact += same;
  }
  return {worst < 1e-12 && bit_exact == 50,
          fmt("|eb_map(tau_f=0) - ps_map| <= %.2e; eb_vi == eb_map bit-exact on %.0f/50", worst,
              static_cast<double>(bit_exact))};
}

Outcome mc_unbiasedness() {
  const MlpConfig c = tiny_config({8, 4}, 2, 2);
  const ModelParams theta = random_params(c, 1);
  const FeatureSnapshot phi0 = snapshot_feature_params(random_params(c, 2));
  auto source = std::make_shared<Dataset>();
  source->inputs = Tensor::matrix({{0.5, -1.0}, {1.5, 0.2}, {-0.7, 0.9}});
  source->labels = {0, 1, 0};
  source->num_classes = 2;
  const ContextDistribution dist = ContextDistribution::train_inputs(source);
  const PriorConfig cfg = prior(2.0, 0.1, 2);
  double exact = 0.0;
  for (const auto& sub : std::vector<std::vector<std::size_t>>{{0, 1}, {0, 2}, {1, 2}}) {
    Tensor x({2, 2});
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t d = 0; d < 2; ++d) x(r, d) = source->inputs(sub[r], d);
    exact -= eb_regularizer(theta, x, phi0, cfg) / 3.0;
  }
  const int n = 10000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double f = mc_kl_estimate(theta, dist, phi0, cfg, static_cast<std::uint64_t>(i));
    sum += f;
    sum_sq += f * f;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum_sq - n * mean * mean) / (n - 1) / n);
  return {std::abs(mean - exact) < 3.0 * se,
          fmt("mean %.6f vs exact %.6f, se %.2e", mean, exact, se)};
}

Outcome kernel_spectrum() {
  double smallest = INFINITY;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 rng(s);
    const std::size_t m = 1 + s % 32, d = 1 + rng() % 16;
    const Tensor k = build_kernel(random_tensor({m, d}, rng, 2.0)).matrix;
    Eigen::MatrixXd e(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) e(i, j) = k(i, j);
    smallest = std::min(smallest, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(e).eigenvalues().minCoeff());
  }
  return {smallest >= 1.0 - 1e-9, fmt("smallest eigenvalue %.12f over 100 kernels", smallest)};
}

Outcome two_moons_far_field() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = scratch("two_moons");
  ex::ExperimentConfig ps = config("two_moons_psmap.json", dir / "psmap");
  ex::ExperimentConfig eb = config("two_moons_fseb.json", dir / "fseb");
  ps.seeds = eb.seeds = {0, 1, 2, 3, 4};
  const auto rp = ex::run(ps);
  const auto re = ex::run(eb);
  double min_acc = 1.0;
  for (const auto* r : {&rp, &re})
    for (const auto& s : r->seeds) min_acc = std::min(min_acc, s.train_accuracy);
  const double far_ps = aggregate_of(rp, "far_field_entropy"), far_eb = aggregate_of(re, "far_field_entropy");
  const double secs = seconds_since(t0);
  fs::remove_all(dir);
  return {far_eb - far_ps >= 0.2 && min_acc >= 0.95 && secs < 300.0,
          fmt("far-field entropy FS-EB %.3f vs PS-MAP %.3f nats", far_eb, far_ps) +
              fmt(", min train accuracy %.3f, %.0f s", min_acc, secs)};
}

Outcome metrics_oracles() {
  double worst = 0.0, worst_sym = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 rng(s);
    const std::size_t n = 2 + rng() % 199, k = 2 + rng() % 4;
    const PredictionSet p = random_set(n, k, rng);
    worst = std::max(worst, std::abs(metrics::ece(p, 15) - oracle_ece(p, 15)));
    const auto [curve, auc] = metrics::selective_curve_and_auc(p);
    const auto expect = oracle_selective(p);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(curve[i].accuracy - expect[i]));
      mean += expect[i] / static_cast<double>(n);
    }
    worst = std::max(worst, std::abs(auc - mean));
    const auto ent = metrics::predictive_entropy(p.probabilities);
    const PredictionSet q = random_set(1 + rng() % 200, k, rng);
    const auto ent_q = metrics::predictive_entropy(q.probabilities);
    const double ab = metrics::auroc_from_entropy(ent, ent_q);
    worst = std::max(worst, std::abs(ab - oracle_auroc(ent, ent_q)));
    worst_sym = std::max(worst_sym, std::abs(ab + metrics::auroc_from_entropy(ent_q, ent) - 1.0));
  }
  return {worst < 1e-12 && worst_sym < 1e-12,
          fmt("max oracle deviation %.2e, auroc symmetry %.2e", worst, worst_sym)};
}

Outcome fsmap_reference() {
  std::mt19937_64 rng(8);
  const fm::OutputFn linear = [](const ad::Var& x, std::span<const ad::Var> leaves) {
    return ad::matmul(x, leaves[0]);
  };
  const fm::NamedParams lp{{"w"}, {random_tensor({3, 2}, rng)}};
  double grad = 0.0;
  for (double v : fm::correction_gradient(linear, lp, random_tensor({6, 3}, rng)).at("w").values())
    grad = std::max(grad, std::abs(v));

  double scale_err = 0.0;
  const Tensor j0 = random_tensor({40, 12}, rng);
  for (double c : {0.1, 2.0, 7.5}) {
    Tensor js = j0;
    for (auto& v : js.data()) v *= c;
    const double shift = fm::log_det_correction(js).value - fm::log_det_correction(j0).value;
    scale_err = std::max(scale_err, std::abs(shift + 12.0 * std::log(c)));
  }

  double det_err = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 r(s);
    const std::size_t cols = 5 + s * 45 / 19, rows = cols + (s * 150) / 19;
    const Tensor j = random_tensor({rows, cols}, r);
    det_err = std::max(det_err, std::abs(fm::log_det_correction(j).value + 0.5 * oracle_log_abs_det(gram(j))));
  }
  return {grad < 1e-4 && scale_err < 1e-9 && det_err < 1e-8,
          fmt("linear correction gradient %.2e, scale law %.2e, log-det vs dense %.2e (up to 200x50)", grad,
              scale_err, det_err)};
}

Outcome ensemble() {
  double worst = 0.0;
  bool single_exact = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const MlpConfig c = tiny_config({8, 4}, 2, 3);
    std::mt19937_64 rng(s);
    const Tensor x = random_tensor({25, 2}, rng, 2.0);
    std::vector<ModelParams> members;
    for (std::uint64_t m = 0; m < 1 + s % 5; ++m) members.push_back(random_params(c, 100 * s + m));
    const Tensor p = ensemble_predict(members, x);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double row = 0.0;
      for (std::size_t k = 0; k < p.cols(); ++k) row += p(i, k);
      worst = std::max(worst, std::abs(row - 1.0));
    }
    single_exact = single_exact && ensemble_predict(std::span(members.data(), 1), x) == predict_proba(x, members[0]);
  }
  return {worst < 1e-12 && single_exact,
          fmt("max row-sum error %.2e", worst) + (single_exact ? ", single member exact" : ", single member differs")};
}

Outcome reproducibility() {
  const fs::path dir = scratch("repro");
  ex::ExperimentConfig c = config("two_moons_fseb.json", dir / "a");
  c.seeds = {3};
  const auto a = ex::run(c);
  c.output_dir = dir / "b";
  const auto b = ex::run(c);
  bool same = a.aggregates.size() == b.aggregates.size();
  for (std::size_t i = 0; same && i < a.aggregates.size(); ++i)
    same = a.aggregates[i].metric == b.aggregates[i].metric && a.aggregates[i].mean == b.aggregates[i].mean;
  fs::remove_all(dir);
  return {same, same ? "metrics bit-identical across two runs" : "metrics differ between runs"};
}

Outcome low_data_trend() {
  const fs::path dir = scratch("low_data");
  std::string detail;
  bool pass = true;
  for (const std::string fraction : {"0.1", "0.5", "1.0"}) {
    auto ps = ex::with_axis(config("low_data_psmap.json", dir / ("ps" + fraction)), ex::AblationAxis::kDataFraction,
                            fraction);
    auto eb = ex::with_axis(config("low_data_fseb.json", dir / ("eb" + fraction)), ex::AblationAxis::kDataFraction,
                            fraction);
    const auto rp = ex::run(ps), re = ex::run(eb);
    int wins = 0;
    for (std::size_t i = 0; i < rp.seeds.size(); ++i)
      wins += seed_metric(re.seeds[i], "ood_auroc") >= seed_metric(rp.seeds[i], "ood_auroc");
    pass = pass && wins >= 4;
    detail += (detail.empty() ? "" : "; ") + ("fraction " + fraction) +
              fmt(": FS-EB >= PS-MAP in %.0f/5 seeds (mean AUROC %.3f vs %.3f)", wins, aggregate_of(re, "ood_auroc"),
                  aggregate_of(rp, "ood_auroc"));
  }
  fs::remove_all(dir);
  return {pass, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_equivalence},
      {"reduction chain", reduction_chain},
      {"Monte Carlo unbiasedness", mc_unbiasedness},
      {"kernel spectrum", kernel_spectrum},
      {"two moons far-field uncertainty", two_moons_far_field},
      {"metrics oracles", metrics_oracles},
      {"FS-MAP reference", fsmap_reference},
      {"ensemble", ensemble},
      {"reproducibility", reproducibility},
      {"low-data OOD trend", low_data_trend},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu %s: %s (%s)\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
