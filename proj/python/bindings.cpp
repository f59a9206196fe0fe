#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mega/attention.hpp"
#include "mega/benchmark.hpp"
#include "mega/config.hpp"
#include "mega/error.hpp"
#include "mega/harness.hpp"
#include "mega/memory_bank.hpp"
#include "mega/nn.hpp"

namespace py = pybind11;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

mega::Tensor to_tensor(const Array& a) {
  mega::Shape shape(a.shape(), a.shape() + a.ndim());
  return mega::Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const mega::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Array masks_to_array(const mega::MaskSet& masks, std::size_t h, std::size_t w) {
  Array out({static_cast<py::ssize_t>(masks.size()), static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  double* d = out.mutable_data();
  for (const auto& m : masks) d = std::copy(m.begin(), m.end(), d);
  return out;
}

std::vector<double> flat(const Array& a) { return {a.data(), a.data() + a.size()}; }

py::dict eval_dict(const mega::EvalRecord& r) {
  py::dict d;
  d["step"] = r.step;
  d["probe_accuracy"] = r.probe_accuracy;
  d["negative_transfer"] = r.negative_transfer;
  d["alignment"] = r.alignment;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Memory-guided category-aware domain alignment at desk scale";

  py::register_exception<mega::NumericError>(m, "NumericError");
  py::register_exception<mega::Error>(m, "MegaError", PyExc_ValueError);

  py::class_<mega::ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init(&mega::ExperimentConfig::defaults))
      .def_static("parse", &mega::ExperimentConfig::parse)
      .def_static("load", &mega::ExperimentConfig::load)
      .def("set", &mega::ExperimentConfig::set)
      .def("serialize", &mega::ExperimentConfig::serialize)
      .def("validate", &mega::ExperimentConfig::validate)
      .def("hash_hex", &mega::ExperimentConfig::hash_hex)
      .def_property(
          "variant", [](const mega::ExperimentConfig& c) { return mega::variant_name(c.variant); },
          [](mega::ExperimentConfig& c, const std::string& v) { c.variant = mega::parse_variant(v); })
      .def_readwrite("steps", &mega::ExperimentConfig::steps)
      .def_readwrite("eval_interval", &mega::ExperimentConfig::eval_interval)
      .def_readwrite("seeds", &mega::ExperimentConfig::seeds)
      .def_readwrite("memory_items", &mega::ExperimentConfig::memory_items)
      .def_property_readonly("categories", [](const mega::ExperimentConfig& c) { return c.scene.categories; })
      .def("__repr__", [](const mega::ExperimentConfig& c) { return "<ExperimentConfig " + c.hash_hex() + ">"; });

  m.def(
      "run",
      [](const mega::ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& out) {
        py::gil_scoped_release release;
        auto r = mega::run(c, seed, out);
        py::gil_scoped_acquire acquire;
        py::dict d = eval_dict(r.final_eval);
        d["dir"] = r.dir.string();
        return d;
      },
      py::arg("config"), py::arg("seed"), py::arg("out"), "Train one variant for one seed; returns final metrics.");

  m.def(
      "summarize",
      [](const std::filesystem::path& dir, bool allow_mixed) {
        const auto s = mega::summarize(dir, allow_mixed);
        py::dict out;
        for (const auto& v : s.variants) {
          py::dict metrics;
          for (const auto& mm : v.metrics) metrics[py::str(mm.name)] = py::make_tuple(mm.median, mm.iqr);
          out[py::str(v.variant)] = metrics;
        }
        return py::make_tuple(s.config_hash, out, s.table);
      },
      py::arg("dir"), py::arg("allow_mixed") = false);

  m.def(
      "generate_scene",
      [](const mega::ExperimentConfig& c, const std::string& domain, std::uint64_t seed) {
        auto rng = mega::make_rng(seed, 0);
        const auto d = domain == "target" ? mega::Domain::kTarget : mega::Domain::kSource;
        const auto s = mega::generate_scene(c.scene, d, rng);
        return py::make_tuple(to_array(s.input), masks_to_array(s.masks, c.scene.height, c.scene.width));
      },
      py::arg("config"), py::arg("domain"), py::arg("seed"), "Returns (input C×H×W, masks K×H×W).");

  m.def(
      "read",
      [](const Array& memory, const Array& query) {
        const auto r = mega::read(to_tensor(memory), to_tensor(query));
        return py::make_tuple(to_array(r.weights), to_array(r.retrieved));
      },
      py::arg("memory"), py::arg("query"), "Memory read: (weights q, retrieved vector).");

  m.def(
      "read_map", [](const Array& memory, const Array& map) { return to_array(mega::read_map(to_tensor(memory), to_tensor(map))); },
      py::arg("memory"), py::arg("map"));

  m.def(
      "write",
      [](const Array& memory, const Array& features) {
        const mega::CategoryFeatureSet set{to_tensor(features)};
        const auto mem = to_tensor(memory);
        const auto p = mega::write_similarity(mem, set);
        return p ? to_array(mega::write_update(mem, set, *p)) : to_array(mem);
      },
      py::arg("memory"), py::arg("features"), "Memory write of N×C features into an N_m×C memory.");

  m.def(
      "memory_loss",
      [](const Array& bank, const std::vector<std::optional<Array>>& features, double margin, const std::string& form) {
        if (bank.ndim() != 3) throw mega::Error("bank must be K×N_m×C");
        mega::MemoryBank b(bank.shape(0), bank.shape(1), bank.shape(2));
        const std::size_t K = bank.shape(0), N = bank.shape(1), C = bank.shape(2);
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < N; ++j) b.set_item(k, j, {bank.data() + (k * N + j) * C, C});
        std::vector<mega::CategoryFeatureSet> sets;
        for (const auto& f : features) sets.push_back(f ? mega::CategoryFeatureSet{to_tensor(*f)} : mega::CategoryFeatureSet{});
        const auto uf = form == "hinge" ? mega::UniquenessForm::kHinge : mega::UniquenessForm::kPrinted;
        return mega::memory_loss(b, sets, margin, uf).item();
      },
      py::arg("bank"), py::arg("features"), py::arg("margin") = 1.0, py::arg("form") = "printed");

  m.def(
      "cosine_attention",
      [](const Array& map, const Array& retrieved) {
        const auto a = mega::cosine_attention(to_tensor(map), to_tensor(retrieved));
        Array binary(std::vector<py::ssize_t>(a.raw.shape().begin(), a.raw.shape().end()));
        std::copy(a.binary.begin(), a.binary.end(), binary.mutable_data());
        return py::make_tuple(to_array(a.raw), binary);
      },
      py::arg("map"), py::arg("retrieved"), "Returns (raw H×W, binary H×W).");

  m.def(
      "binarize", [](const Array& raw) { return mega::binarize(flat(raw)); }, py::arg("raw"));
}
