#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fseb/data.hpp"
#include "fseb/errors.hpp"
#include "fseb/experiment.hpp"
#include "fseb/function_prior.hpp"
#include "fseb/metrics.hpp"
#include "fseb/model.hpp"
#include "fseb/training.hpp"

namespace py = pybind11;
namespace ex = fseb::experiment;
using fseb::Tensor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) return Tensor({static_cast<std::size_t>(a.shape(0))}, {a.data(), a.data() + a.size()});
  if (a.ndim() != 2) throw fseb::ShapeError("expected a 1-d or 2-d array, got " + std::to_string(a.ndim()) + "-d");
  return Tensor::matrix(a.shape(0), a.shape(1), {a.data(), a.data() + a.size()});
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

fseb::metrics::PredictionSet prediction_set(const Array& probs, std::vector<std::size_t> labels) {
  return {to_tensor(probs), std::move(labels)};
}

py::tuple dataset_tuple(const fseb::Dataset& d) {
  return py::make_tuple(to_array(d.inputs), py::array_t<std::size_t>(d.labels.size(), d.labels.data()));
}

}  // namespace

PYBIND11_MODULE(_fseb, m) {
  m.doc() = "Native core of the FS-EB toolkit.";

  py::register_exception<fseb::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<fseb::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<fseb::NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<fseb::DataError>(m, "DataError", PyExc_IOError);

  m.attr("RESULTS_SCHEMA_VERSION") = ex::kResultsSchemaVersion;
  m.def("version", [] { return std::string(ex::version_string()); });

  m.def("two_moons", [](std::size_t n, double noise, std::uint64_t seed) {
    return dataset_tuple(fseb::gen_two_moons(n, noise, seed));
  }, py::arg("n"), py::arg("noise") = 0.1, py::arg("seed") = 0);
  m.def("gaussian_blobs", [](std::size_t n, const std::vector<std::vector<double>>& centers, double sd,
                             std::uint64_t seed) {
    return dataset_tuple(fseb::gen_gaussian_blobs(n, centers, sd, seed));
  }, py::arg("n"), py::arg("centers"), py::arg("sd"), py::arg("seed") = 0);

  m.def("context_kernel", [](const Array& h) { return to_array(fseb::build_kernel(to_tensor(h)).matrix); },
        py::arg("features"), "K = H H^T + I for an M x D feature matrix.");
  m.def("mahalanobis_sq", [](const Array& v, const Array& h) {
    const Tensor t = to_tensor(v);
    return fseb::mahalanobis_sq(t.data(), fseb::build_kernel(to_tensor(h)));
  }, py::arg("v"), py::arg("features"), "v^T K^{-1} v with K built from the features.");

  m.def("nll_and_accuracy", [](const Array& p, std::vector<std::size_t> y) {
    return fseb::metrics::nll_and_accuracy(prediction_set(p, std::move(y)));
  }, py::arg("probabilities"), py::arg("labels"));
  m.def("ece", [](const Array& p, std::vector<std::size_t> y, std::size_t bins) {
    return fseb::metrics::ece(prediction_set(p, std::move(y)), bins);
  }, py::arg("probabilities"), py::arg("labels"), py::arg("m_bins") = 15);
  m.def("predictive_entropy", [](const Array& p) { return fseb::metrics::predictive_entropy(to_tensor(p)); },
        py::arg("probabilities"));
  m.def("selective_auc", [](const Array& p, std::vector<std::size_t> y) {
    return fseb::metrics::selective_curve_and_auc(prediction_set(p, std::move(y))).second;
  }, py::arg("probabilities"), py::arg("labels"));
  m.def("auroc_from_entropy", &fseb::metrics::auroc_from_entropy, py::arg("entropy_in"), py::arg("entropy_out"));

  m.def("load_config_json", [](const std::filesystem::path& path) { return ex::to_json(ex::load_config(path)).dump(); },
        py::arg("path"));
  m.def("config_hash", [](const std::filesystem::path& path) { return ex::config_hash(ex::load_config(path)); },
        py::arg("path"));
  m.def("run", [](const std::filesystem::path& path, std::optional<std::filesystem::path> output_dir,
                  std::optional<std::size_t> workers) {
    ex::ExperimentConfig c = ex::load_config(path);
    if (output_dir) c.output_dir = *output_dir;
    ex::RunResult r;
    {
      py::gil_scoped_release release;
      r = ex::run(c, workers.value_or(ex::worker_count()));
    }
    return py::make_tuple(ex::results_json(r).dump(), r.results_path);
  }, py::arg("config_path"), py::arg("output_dir") = py::none(), py::arg("workers") = py::none());

  m.def("predict_proba", [](const std::filesystem::path& config_path, const std::vector<std::filesystem::path>& ckpts,
                            const Array& x) {
    const ex::ExperimentConfig c = ex::load_config(config_path);
    std::vector<fseb::ModelParams> members;
    for (const auto& p : ckpts) members.push_back(fseb::load_checkpoint(p, c.model));
    return to_array(fseb::ensemble_predict(members, to_tensor(x)));
  }, py::arg("config_path"), py::arg("checkpoints"), py::arg("x"),
     "Ensemble-averaged class probabilities of one or more checkpoints.");
}
