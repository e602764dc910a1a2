#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "crft/checkpoint.hpp"
#include "crft/cli.hpp"
#include "crft/experiments.hpp"
#include "crft/heatmap.hpp"
#include "crft/info_flow.hpp"
#include "crft/json_io.hpp"

namespace py = pybind11;
using namespace crft;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

// Configs cross the boundary as plain dicts through their JSON form.
Json to_json_value(const py::object& o) {
    return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

template <class T>
T config_from(const py::object& o) {
    T value{};
    if (!o.is_none()) merge_json(to_json_value(o), value);
    return value;
}

py::dict scored_dict(const ScoredPositions& s) {
    py::dict d;
    for (const auto& [pos, score] : s) d[py::int_(pos)] = score;
    return d;
}

ScoredPositions scored_from(const py::dict& d) {
    ScoredPositions s;
    for (const auto& [k, v] : d) s[k.cast<int>()] = v.cast<double>();
    return s;
}

SegmentMap prompt_segments(const TaskSample& s) {
    SegmentMap seg;
    seg.tags.assign(s.segments.tags.begin(), s.segments.tags.begin() + static_cast<std::ptrdiff_t>(s.prompt.size()));
    return seg;
}

struct TrainedInterventions {
    InterventionParams params;
    CrftConfig config;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Critical-representation fine-tuning on a micro transformer";

    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

    py::class_<Model>(m, "Model")
        .def(py::init([](const py::object& config, std::uint64_t seed) {
                 return Model(config_from<ModelConfig>(config), seed);
             }),
             py::arg("config") = py::none(), py::arg("seed") = 0)
        .def_static("load", [](const std::string& path) { return load_checkpoint(path); })
        .def("save", [](const Model& self, const std::string& path) { save_checkpoint(path, self); })
        .def_property_readonly("config", [](const Model& self) { return to_py(to_json(self.config())); })
        .def_property_readonly("weight_names",
                               [](const Model& self) {
                                   std::vector<std::string> names;
                                   for (const auto& w : self.weights()) names.push_back(w.name);
                                   return names;
                               })
        .def("weight", [](const Model& self, const std::string& name) { return to_numpy(self.weight(name)); })
        .def("set_weight",
             [](Model& self, const std::string& name, const py::array_t<double>& value) {
                 Tensor t = from_numpy(value);
                 if (t.shape() != self.weight(name).shape()) throw ShapeError("set_weight: shape mismatch for " + name);
                 self.weight(name) = std::move(t);
             })
        .def("digest", [](const Model& self) { return freeze_digest(self); });

    py::class_<TaskSample>(m, "TaskSample")
        .def_readonly("prompt", &TaskSample::prompt)
        .def_readonly("target", &TaskSample::target)
        .def_readonly("answer", &TaskSample::answer)
        .def_readonly("steps", &TaskSample::steps)
        .def("__repr__", [](const TaskSample& s) {
            return "<TaskSample " + vocab::render(s.prompt) + " " + vocab::render(s.target) + ">";
        });

    py::class_<TrainedInterventions>(m, "Interventions")
        .def_property_readonly("config", [](const TrainedInterventions& self) { return to_py(to_json(self.config)); })
        .def_property_readonly("trainable_count",
                               [](const TrainedInterventions& self) { return self.params.trainable_count(); })
        .def("save", [](const TrainedInterventions& self,
                        const std::string& path) { save_interventions(path, self.params, self.config); })
        .def_static("load", [](const std::string& path) {
            InterventionFile f = load_interventions(path);
            return TrainedInterventions{std::move(f.params), f.config};
        });

    m.def("render", [](const std::vector<int>& tokens) { return vocab::render(tokens); });
    m.def("desk_task", [] { return to_py(to_json(BaseRecipe::desk_task())); });
    m.def(
        "gen_chain_arith",
        [](std::size_t count, const py::object& options, std::uint64_t seed) {
            return gen_chain_arith(count, config_from<ChainArithOptions>(options), seed);
        },
        py::arg("count"), py::arg("options") = py::none(), py::arg("seed") = 0);

    m.def(
        "forward",
        [](const Model& model, const std::vector<int>& tokens) {
            const ForwardTrace tr = forward(model, tokens);
            py::list hidden;
            for (const Tensor& h : tr.hidden) hidden.append(to_numpy(h));
            py::list attention;
            for (const auto& layer : tr.attention) {
                py::list heads;
                for (const Tensor& a : layer) heads.append(to_numpy(a));
                attention.append(heads);
            }
            py::dict out;
            out["hidden"] = hidden;
            out["attention"] = attention;
            out["logits"] = to_numpy(tr.logits);
            return out;
        },
        py::arg("model"), py::arg("tokens"));
    m.def(
        "greedy_decode",
        [](const Model& model, const std::vector<int>& prompt, int max_new, std::optional<int> stop) {
            return greedy_decode(model, prompt, max_new, stop);
        },
        py::arg("model"), py::arg("prompt"), py::arg("max_new"), py::arg("stop") = py::none());

    m.def("attention_grid", [](const Model& model, const std::vector<int>& tokens, int layer) {
        return to_numpy(attention_grid(forward(model, tokens), layer).values);
    });
    m.def("saliency_grid", [](const Model& model, const std::vector<int>& tokens, int layer) {
        const SaliencyPass pass = saliency_pass(model, tokens);
        return to_numpy(saliency_grid(pass.trace, layer, pass.grads).values);
    });
    m.def(
        "self_referential_filter",
        [](const py::array_t<double>& grid, double alpha) {
            return scored_dict(self_referential_filter(InfoGrid{0, from_numpy(grid), GridKind::attention}, alpha));
        },
        py::arg("grid"), py::arg("alpha"));
    m.def(
        "multi_referential_filter",
        [](const py::array_t<double>& grid, double beta) {
            return scored_dict(multi_referential_filter(InfoGrid{0, from_numpy(grid), GridKind::attention}, beta));
        },
        py::arg("grid"), py::arg("beta"));
    m.def(
        "select_positions",
        [](const py::dict& candidates, int k_int, const std::string& criteria, std::uint64_t seed) {
            return select_positions(scored_from(candidates), k_int, parse_criteria(criteria), seed);
        },
        py::arg("candidates"), py::arg("k_int"), py::arg("criteria") = "order", py::arg("seed") = 0);
    m.def(
        "identify",
        [](const Model& model, const TaskSample& sample, const py::object& crft, std::uint64_t key) {
            const CriticalSet set = identify(model, sample.prompt, prompt_segments(sample),
                                             config_from<CrftConfig>(crft), std::nullopt, key);
            py::dict out;
            for (const auto& l : set.layers) out[py::int_(l.layer)] = l.positions;
            return out;
        },
        py::arg("model"), py::arg("sample"), py::arg("crft") = py::none(), py::arg("key") = 0);

    m.def("param_count", [](const py::object& crft, std::uint64_t d, std::uint64_t layers) {
        return param_count(config_from<CrftConfig>(crft), d, layers);
    });
    m.def(
        "train_crft",
        [](const Model& model, const Dataset& data, const py::object& crft, const py::object& train) {
            const CrftConfig cfg = config_from<CrftConfig>(crft).resolved(model.config().n_layers);
            const TrainConfig tc = config_from<TrainConfig>(train);
            CrftResult r;
            {
                py::gil_scoped_release release;
                r = train_crft(model, data, cfg, tc);
            }
            std::vector<double> losses;
            for (const auto& s : r.history.steps) losses.push_back(s.loss);
            py::dict out;
            out["interventions"] = TrainedInterventions{std::move(r.params), cfg};
            out["losses"] = losses;
            out["base_gradient_free"] = r.base_gradient_free;
            return out;
        },
        py::arg("model"), py::arg("data"), py::arg("crft") = py::none(), py::arg("train") = py::none());
    m.def(
        "evaluate",
        [](const Model& model, const Dataset& data, const TrainedInterventions* iv) {
            py::gil_scoped_release release;
            if (iv == nullptr) return evaluate(model, data).accuracy;
            return evaluate(model, data, InterventionSpec{&iv->params, iv->config}).accuracy;
        },
        py::arg("model"), py::arg("data"), py::arg("interventions") = nullptr);

    m.def("render_pgm", [](const py::array_t<double>& grid) { return render_pgm(from_numpy(grid)); });
    m.def("render_csv", [](const py::array_t<double>& grid) { return render_csv(from_numpy(grid)); });

    m.def("run_cli", [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        const int code = run_command(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
    });
}
