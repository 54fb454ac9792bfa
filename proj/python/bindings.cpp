#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "focatt/bagprep.hpp"
#include "focatt/checkpoint.hpp"
#include "focatt/error.hpp"
#include "focatt/hencoder.hpp"
#include "focatt/hierarchy.hpp"
#include "focatt/model.hpp"
#include "focatt/synthgen.hpp"
#include "focatt/trainer.hpp"

namespace py = pybind11;
using namespace focatt;

using Matrix = std::vector<std::vector<double>>;

PYBIND11_MODULE(_core, m) {
  m.doc() = "Focal-attention multiple-instance learning core";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", error.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());
  py::register_exception<StateError>(m, "StateError", error.ptr());
  py::register_exception<ArgumentError>(m, "ArgumentError", error.ptr());
  py::register_exception<ContractError>(m, "ContractError", error.ptr());
  py::register_exception<EmptySlideError>(m, "EmptySlideError", error.ptr());
  py::register_exception<ProvenanceError>(m, "ProvenanceError", error.ptr());
  py::register_exception<IoError>(m, "IoError", error.ptr());

  py::class_<HierarchicalLabel>(m, "HierarchicalLabel")
      .def(py::init<>())
      .def(py::init([](std::int32_t site, std::int32_t diagnosis) { return HierarchicalLabel{site, diagnosis}; }),
           py::arg("site"), py::arg("diagnosis"))
      .def_readwrite("site", &HierarchicalLabel::site)
      .def_readwrite("diagnosis", &HierarchicalLabel::diagnosis)
      .def(py::self == py::self)
      .def("__repr__", [](const HierarchicalLabel& l) {
        return "HierarchicalLabel(site=" + std::to_string(l.site) + ", diagnosis=" + std::to_string(l.diagnosis) + ")";
      });

  py::class_<HierarchyTable>(m, "HierarchyTable")
      .def(py::init<const std::vector<std::pair<std::string, std::string>>&>(), py::arg("diagnosis_site_pairs"))
      .def_static("parse", &HierarchyTable::parse)
      .def_static("read", &HierarchyTable::read)
      .def("serialize", &HierarchyTable::serialize)
      .def("write", &HierarchyTable::write)
      .def_property_readonly("site_count", &HierarchyTable::site_count)
      .def_property_readonly("diagnosis_count", &HierarchyTable::diagnosis_count)
      .def_property_readonly("sites", &HierarchyTable::sites)
      .def_property_readonly("diagnoses", &HierarchyTable::diagnoses)
      .def("site_of", &HierarchyTable::site_of)
      .def("group", &HierarchyTable::group)
      .def("label_for", py::overload_cast<std::string_view>(&HierarchyTable::label_for, py::const_))
      .def("label_for", py::overload_cast<std::size_t>(&HierarchyTable::label_for, py::const_));

  py::class_<GridCoord>(m, "GridCoord")
      .def(py::init([](std::int32_t row, std::int32_t col) { return GridCoord{row, col}; }), py::arg("row"),
           py::arg("col"))
      .def_readwrite("row", &GridCoord::row)
      .def_readwrite("col", &GridCoord::col)
      .def(py::self == py::self);

  py::class_<Bag>(m, "Bag")
      .def(py::init<>())
      .def(py::init([](Matrix features, HierarchicalLabel label, std::string slide_id) {
             Bag b;
             b.features = std::move(features);
             b.label = label;
             b.slide_id = std::move(slide_id);
             b.validate();
             return b;
           }),
           py::arg("features"), py::arg("label") = HierarchicalLabel{}, py::arg("slide_id") = "")
      .def_readwrite("slide_id", &Bag::slide_id)
      .def_readwrite("features", &Bag::features)
      .def_readwrite("label", &Bag::label)
      .def_readwrite("coords", &Bag::coords)
      .def("__len__", &Bag::size)
      .def_property_readonly("dim", &Bag::dim)
      .def(py::self == py::self);

  m.def("read_bag", &read_bag);
  m.def("write_bag", &write_bag);
  m.def("read_bag_dir", &read_bag_dir);
  m.def("bag_checksum", &bag_checksum);

  py::class_<SynthSpec>(m, "SynthSpec")
      .def(py::init<>())
      .def_static("parse", &SynthSpec::parse)
      .def("serialize", &SynthSpec::serialize)
      .def("validate", &SynthSpec::validate)
      .def_readwrite("diagnoses_per_site", &SynthSpec::diagnoses_per_site)
      .def_readwrite("bags_per_diagnosis", &SynthSpec::bags_per_diagnosis)
      .def_readwrite("instances_min", &SynthSpec::instances_min)
      .def_readwrite("instances_max", &SynthSpec::instances_max)
      .def_readwrite("feature_dim", &SynthSpec::feature_dim)
      .def_readwrite("key_fraction", &SynthSpec::key_fraction)
      .def_readwrite("noise_sigma", &SynthSpec::noise_sigma)
      .def_readwrite("site_scale", &SynthSpec::site_scale)
      .def_readwrite("diagnosis_scale", &SynthSpec::diagnosis_scale)
      .def_readwrite("context_coupled", &SynthSpec::context_coupled)
      .def_readwrite("marker_bias", &SynthSpec::marker_bias)
      .def_readwrite("test_fraction", &SynthSpec::test_fraction)
      .def_readwrite("seed", &SynthSpec::seed);

  py::class_<SynthBags>(m, "SynthBags")
      .def_readonly("table", &SynthBags::table)
      .def_readonly("train", &SynthBags::train)
      .def_readonly("test", &SynthBags::test)
      .def_readonly("train_keys", &SynthBags::train_keys)
      .def_readonly("test_keys", &SynthBags::test_keys)
      .def_readonly("oracle_accuracy", &SynthBags::oracle_accuracy);

  m.def("generate_bags", &generate_bags, py::arg("spec"), py::call_guard<py::gil_scoped_release>());
  m.def("write_bags", &write_bags, py::arg("dir"), py::arg("data"));

  py::enum_<Pool>(m, "Pool").value("sum", Pool::sum).value("mean", Pool::mean).value("max", Pool::max);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("input_dim", &ModelConfig::input_dim)
      .def_readwrite("class_count", &ModelConfig::class_count)
      .def_readwrite("hidden", &ModelConfig::hidden)
      .def_readwrite("context_dim", &ModelConfig::context_dim)
      .def_readwrite("transform_dim", &ModelConfig::transform_dim)
      .def_readwrite("pool", &ModelConfig::pool)
      .def_readwrite("use_context_in_attention", &ModelConfig::use_context_in_attention)
      .def_readwrite("use_focal", &ModelConfig::use_focal)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("canonical_reduction", &ModelConfig::canonical_reduction);

  py::class_<FocAttModel>(m, "FocAttModel")
      .def_static("make", &FocAttModel::make, py::arg("config"), py::arg("seed"))
      .def_static("load", [](const std::filesystem::path& p) { return model_from_checkpoint(read_checkpoint(p)); })
      .def("save", [](const FocAttModel& model, const std::filesystem::path& p) {
        write_checkpoint(p, model_checkpoint(model));
      })
      .def_readonly("use_focal", &FocAttModel::use_focal)
      .def_readonly("use_context_in_attention", &FocAttModel::use_context_in_attention)
      .def(py::self == py::self);

  py::class_<BagOutput>(m, "BagOutput")
      .def_readonly("p", &BagOutput::p)
      .def_readonly("a", &BagOutput::a)
      .def_readonly("gamma", &BagOutput::gamma)
      .def_readonly("g", &BagOutput::g)
      .def_readonly("y", &BagOutput::y);

  m.def(
      "forward", [](const FocAttModel& model, const Bag& bag) { return forward(model, bag); }, py::arg("model"),
      py::arg("bag"), "Inference-mode forward pass.");
  m.def(
      "aggregate",
      [](const Matrix& p, const std::vector<double>& gamma, const std::vector<double>& a) {
        return aggregate(p, gamma, a);
      },
      py::arg("p"), py::arg("gamma"), py::arg("a"));
  m.def("bag_loss", &bag_loss, py::arg("model"), py::arg("bag"), py::arg("target"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def("validate", &TrainConfig::validate)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("clip_norm", &TrainConfig::clip_norm)
      .def_readwrite("dropout", &TrainConfig::dropout)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("batch", &TrainConfig::batch)
      .def_readwrite("validation_fraction", &TrainConfig::validation_fraction);

  py::class_<HistoryRow>(m, "HistoryRow")
      .def_readonly("epoch", &HistoryRow::epoch)
      .def_readonly("split", &HistoryRow::split)
      .def_readonly("loss", &HistoryRow::loss)
      .def_readonly("accuracy", &HistoryRow::accuracy);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("best", &TrainResult::best)
      .def_readonly("last", &TrainResult::last)
      .def_readonly("best_epoch", &TrainResult::best_epoch)
      .def_readonly("best_validation_accuracy", &TrainResult::best_validation_accuracy)
      .def_readonly("best_validation_loss", &TrainResult::best_validation_loss)
      .def_readonly("history", &TrainResult::history);

  m.def(
      "split_train_validation",
      [](const std::vector<Bag>& bags, double fraction, std::uint64_t seed) {
        auto s = split_train_validation(bags, fraction, seed);
        return std::make_pair(std::move(s.train), std::move(s.validation));
      },
      py::arg("bags"), py::arg("validation_fraction"), py::arg("seed"));
  m.def(
      "train",
      [](const FocAttModel& initial, const std::vector<Bag>& train, const std::vector<Bag>& validation,
         const TrainConfig& config) { return train_mil(initial, train, validation, config); },
      py::arg("initial"), py::arg("train"), py::arg("validation"), py::arg("config") = TrainConfig{},
      py::call_guard<py::gil_scoped_release>());

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("accuracy", &EvalReport::accuracy)
      .def_readonly("loss", &EvalReport::loss)
      .def_readonly("per_class_accuracy", &EvalReport::per_class_accuracy)
      .def_readonly("auc", &EvalReport::auc)
      .def_readonly("predictions", &EvalReport::predictions);

  m.def(
      "evaluate", [](const FocAttModel& model, const std::vector<Bag>& bags) { return evaluate(model, bags); },
      py::arg("model"), py::arg("bags"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "auc", [](const std::vector<double>& scores, const std::vector<int>& labels) { return auc_rank(scores, labels); },
      py::arg("scores"), py::arg("labels"));

  py::class_<KMeansResult>(m, "KMeansResult")
      .def_readonly("assignments", &KMeansResult::assignments)
      .def_readonly("centers", &KMeansResult::centers)
      .def_readonly("inertia", &KMeansResult::inertia)
      .def_readonly("iterations", &KMeansResult::iterations)
      .def_readonly("converged", &KMeansResult::converged)
      .def_readonly("inertia_history", &KMeansResult::inertia_history);

  m.def(
      "kmeans",
      [](const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iter, std::size_t restarts) {
        KMeansOptions opts;
        opts.max_iter = max_iter;
        opts.restarts = restarts;
        return kmeans_fit(points, k, seed, opts);
      },
      py::arg("points"), py::arg("k"), py::arg("seed") = 0, py::arg("max_iter") = KMeansOptions{}.max_iter,
      py::arg("restarts") = KMeansOptions{}.restarts);
  m.def(
      "within_cluster_ss",
      [](const Matrix& points, const std::vector<std::size_t>& assignments, std::size_t k) {
        return within_cluster_ss(points, assignments, k);
      },
      py::arg("points"), py::arg("assignments"), py::arg("k"));

  py::class_<HierOutput>(m, "HierOutput")
      .def_readonly("p_site", &HierOutput::p_site)
      .def_readonly("p_pd_given_site", &HierOutput::p_pd_given_site)
      .def_readonly("p_pd_marginal", &HierOutput::p_pd_marginal);

  m.def(
      "hier_probabilities",
      [](const std::vector<double>& site_logits, const std::vector<double>& pd_logits, const HierarchyTable& table) {
        return hier_probabilities(site_logits, pd_logits, table);
      },
      py::arg("site_logits"), py::arg("pd_logits"), py::arg("table"));
}
