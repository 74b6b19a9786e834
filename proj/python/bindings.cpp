#include <optional>

#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mpq/graph.hpp"
#include "mpq/memory_model.hpp"
#include "mpq/quantizer.hpp"
#include "mpq/search.hpp"

namespace py = pybind11;
using namespace mpq;

namespace {

py::dict report_dict(const FootprintReport& r) {
    py::dict d;
    d["rom_total"] = r.rom_total;
    d["rom_per_layer"] = r.rom_per_layer;
    d["ram_peak"] = r.ram_peak;
    d["ram_peak_step"] = r.ram_peak_step;
    d["steps"] = r.steps;
    d["per_step_ram"] = r.per_step_ram;
    return d;
}

MemoryBudget budget(std::optional<std::int64_t> rom, std::optional<std::int64_t> ram) {
    MemoryBudget b;
    if (rom) b.rom_bytes = *rom;
    if (ram) b.ram_bytes = *ram;
    return b;
}

}  // namespace

PYBIND11_MODULE(_mpq, m) {
    m.doc() = "Mixed-precision quantization policies under ROM/RAM budgets";

    auto error = py::register_exception<Error>(m, "Error");
    py::register_exception<ParseError>(m, "ParseError", error);
    py::register_exception<ValidationError>(m, "ValidationError", error);
    py::register_exception<PolicyError>(m, "PolicyError", error);
    py::register_exception<InfeasibleError>(m, "InfeasibleError", error);
    py::register_exception<QuantError>(m, "QuantError", error);

    py::class_<NetworkGraph>(m, "Graph")
        .def_static("load", &load_graph, py::arg("path"))
        .def_static("parse", [](const std::string& text) { return parse_graph(text); }, py::arg("text"))
        .def("to_json", &graph_to_json)
        .def_property_readonly("order", &NetworkGraph::order)
        .def_property_readonly("input_id", &NetworkGraph::input_id)
        .def_property_readonly("logits_tensor", &NetworkGraph::logits_tensor)
        .def("weighted_layers", &NetworkGraph::weighted_layers)
        .def("quantizable_activations", &NetworkGraph::quantizable_activations)
        .def("residual_tensors", &NetworkGraph::residual_tensors)
        .def("layer_kind", [](const NetworkGraph& g, LayerId id) { return std::string(to_string(g.layer(id).kind)); })
        .def("param_count", [](const NetworkGraph& g, LayerId id) { return g.layer(id).param_count; })
        .def("total_params", &NetworkGraph::total_params)
        .def("__len__", [](const NetworkGraph& g) { return g.layers().size(); });

    py::class_<QuantPolicy>(m, "Policy")
        .def(py::init<>())
        .def_static("uniform", &QuantPolicy::uniform, py::arg("graph"), py::arg("weight_bits"), py::arg("act_bits"))
        .def_static("from_json", &policy_from_json, py::arg("text"))
        .def("to_json", &policy_to_json)
        .def("validate", [](const QuantPolicy& p, const NetworkGraph& g) { validate_policy(g, p); }, py::arg("graph"))
        .def_readwrite("weight_bits", &QuantPolicy::weight_bits)
        .def_readwrite("act_bits", &QuantPolicy::act_bits)
        .def_readwrite("frozen_weights", &QuantPolicy::frozen_weights)
        .def_readwrite("frozen_acts", &QuantPolicy::frozen_acts)
        .def(py::self == py::self);

    m.def(
        "footprint",
        [](const NetworkGraph& g, const QuantPolicy& p, bool include_overheads) {
            return report_dict(footprint(g, p, FootprintOptions{include_overheads}));
        },
        py::arg("graph"), py::arg("policy"), py::arg("include_overheads") = true);
    m.def(
        "enforce_rom",
        [](const NetworkGraph& g, const QuantPolicy& p, std::int64_t rom, bool include_overheads) {
            return enforce_rom(g, p, budget(rom, std::nullopt), FootprintOptions{include_overheads});
        },
        py::arg("graph"), py::arg("policy"), py::arg("rom_bytes"), py::arg("include_overheads") = true);
    m.def(
        "enforce_ram",
        [](const NetworkGraph& g, const QuantPolicy& p, std::int64_t ram) {
            return enforce_ram(g, p, budget(std::nullopt, ram));
        },
        py::arg("graph"), py::arg("policy"), py::arg("ram_bytes"));

    m.def(
        "pack",
        [](const std::vector<std::int32_t>& values, int bits, bool is_signed) {
            const auto bytes = pack_subbyte(values, bits, is_signed);
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        },
        py::arg("values"), py::arg("bits"), py::arg("signed"));
    m.def(
        "unpack",
        [](const py::bytes& data, int bits, std::size_t n, bool is_signed) {
            const std::string s = data;
            return unpack_subbyte({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}, bits, n, is_signed);
        },
        py::arg("data"), py::arg("bits"), py::arg("count"), py::arg("signed"));

    m.def("bits_from_action", &bits_from_action, py::arg("action"));
    m.def("action_center", &action_center, py::arg("bits"));
}
