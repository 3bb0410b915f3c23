#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tnr/experiment.hpp"
#include "tnr/runtime.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace tnr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// results cross the boundary as JSON so Python sees plain dicts
py::object to_py(const nlohmann::json& j) {
    py::object loads = py::module_::import("json").attr("loads");
    return loads(j.dump());
}

nlohmann::json from_py(const py::handle& obj) {
    py::object dumps = py::module_::import("json").attr("dumps");
    return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

ExperimentConfig config_of(const fs::path& path, std::optional<std::uint64_t> seed) {
    return load_config(path, seed);
}

template <typename T>
Tensor<T> tensor_of(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    std::vector<T> values(a.data(), a.data() + a.size());
    return Tensor<T>(std::move(shape), std::move(values));
}

Array array_of(const std::vector<std::array<double, 2>>& rows) {
    Array out({rows.size(), std::size_t{2}});
    auto m = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        m(i, 0) = rows[i][0];
        m(i, 1) = rows[i][1];
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Trap-and-replace backdoor defense";
    tune_runtime();

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

    m.def("resolve_config", [](const fs::path& path, std::optional<std::uint64_t> seed) {
        return to_py(config_json(config_of(path, seed)));
    }, py::arg("path"), py::arg("seed") = py::none(), "Config with defaults filled in and seeds derived.");

    m.def("run", [](const fs::path& config, const fs::path& out, std::optional<std::uint64_t> seed) {
        const auto c = config_of(config, seed);
        RunReport r;
        {
            py::gil_scoped_release release;
            r = cmd_run(c, out);
        }
        return to_py(nlohmann::json(r));
    }, py::arg("config"), py::arg("out"), py::arg("seed") = py::none());

    m.def("poison", [](const fs::path& config, const fs::path& out, std::optional<std::uint64_t> seed) {
        return to_py(nlohmann::json(cmd_poison(config_of(config, seed), out)));
    }, py::arg("config"), py::arg("out"), py::arg("seed") = py::none());

    m.def("evaluate", [](const fs::path& config, const fs::path& checkpoint, const fs::path& out) {
        return to_py(nlohmann::json(cmd_eval(config_of(config, std::nullopt), checkpoint, out)));
    }, py::arg("config"), py::arg("checkpoint"), py::arg("out"));

    m.def("pca_scatter", [](const fs::path& config, const fs::path& checkpoint, const fs::path& out) {
        const auto s = cmd_pca(config_of(config, std::nullopt), checkpoint, out);
        py::list groups;
        for (auto g : s.groups) groups.append(std::string(to_string(g)));
        return py::make_tuple(array_of(s.coords), groups);
    }, py::arg("config"), py::arg("checkpoint"), py::arg("out"));

    m.def("fingerprint", [](const py::object& obj) { return fingerprint(from_py(obj)); });

    m.def("pca2", [](const Array& features) {
        if (features.ndim() != 2) throw ShapeError("pca2: expected a 2-d array");
        const auto p = pca2(tensor_of<float>(features));
        Array comps({std::size_t{2}, p.mean.size()});
        auto c = comps.mutable_unchecked<2>();
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t d = 0; d < p.mean.size(); ++d) c(k, d) = p.components[k][d];
        py::dict out;
        out["components"] = comps;
        out["explained_variance"] = py::make_tuple(p.explained_variance[0], p.explained_variance[1]);
        out["coords"] = array_of(p.coords);
        return out;
    }, py::arg("features"));

    m.def("centroid_separation", [](const Array& clean_target, const Array& clean_source, const Array& poisoned) {
        FeatureGroups g{tensor_of<float>(clean_target), tensor_of<float>(clean_source), tensor_of<float>(poisoned)};
        return centroid_separation(g);
    }, py::arg("clean_target"), py::arg("clean_source"), py::arg("poisoned_source"));

    m.def("total_variation", [](const Array& img) { return total_variation(tensor_of<double>(img)).item(); },
          py::arg("images"));

    m.def("cross_entropy", [](const Array& logits, const std::vector<int>& labels, double smoothing) {
        return softmax_cross_entropy(tensor_of<double>(logits), labels, smoothing).item();
    }, py::arg("logits"), py::arg("labels"), py::arg("smoothing") = 0.0);
}
