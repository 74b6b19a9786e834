#include "mpq/graph.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mpq {

namespace {

using json = nlohmann::json;

constexpr std::array<std::pair<LayerKind, std::string_view>, 9> kKindNames{{
    {LayerKind::conv2d, "conv2d"},
    {LayerKind::depthwise_conv2d, "depthwise_conv2d"},
    {LayerKind::pointwise_conv2d, "pointwise_conv2d"},
    {LayerKind::fully_connected, "fully_connected"},
    {LayerKind::add_residual, "add_residual"},
    {LayerKind::avg_pool, "avg_pool"},
    {LayerKind::relu_clip, "relu_clip"},
    {LayerKind::input, "input"},
    {LayerKind::output, "output"},
}};

std::string shape_str(const Shape& s) {
    return "[" + std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + "]";
}

void expect(bool cond, LayerId id, const std::string& what) {
    if (!cond) throw ValidationError(id, what);
}

void check_counts(const LayerSpec& l, std::int64_t params, bool weighted) {
    expect(l.param_count == params, l.id,
           "param_count " + std::to_string(l.param_count) + " != expected " + std::to_string(params));
    if (weighted) {
        expect(l.bias_count == 0 || l.bias_count == l.out_channels, l.id,
               "bias_count must be 0 or out_channels");
    } else {
        expect(l.bias_count == 0, l.id, "bias_count must be 0 for a layer without weights");
    }
}

void check_window(const LayerSpec& l, int out_c) {
    const Shape& in = l.input_shape;
    const int oh = window_out(in.h, l.kernel_h, l.stride, l.padding);
    const int ow = window_out(in.w, l.kernel_w, l.stride, l.padding);
    const Shape expected{out_c, oh, ow};
    expect(oh > 0 && ow > 0 && l.output_shape == expected, l.id,
           "output_shape " + shape_str(l.output_shape) + " inconsistent with window arithmetic (expected " +
               shape_str(expected) + ")");
}

void validate_layer(const LayerSpec& l) {
    expect(l.kernel_h >= 1 && l.kernel_w >= 1 && l.stride >= 1 && l.padding >= 0, l.id,
           "kernel/stride must be >= 1 and padding >= 0");
    for (const Shape* s : {&l.input_shape, &l.output_shape}) {
        expect(s->c > 0 && s->h > 0 && s->w > 0, l.id, "shape dims must be positive");
    }
    const std::size_t n_inputs = l.input_ids.size();
    const Shape& in = l.input_shape;
    switch (l.kind) {
        case LayerKind::input:
            expect(n_inputs == 0, l.id, "input layer takes no inputs");
            expect(l.output_shape == in, l.id, "input layer shapes differ");
            check_counts(l, 0, false);
            break;
        case LayerKind::output:
            expect(n_inputs == 1, l.id, "output layer takes exactly one input");
            expect(l.output_shape == in, l.id, "output layer shapes differ");
            check_counts(l, 0, false);
            break;
        case LayerKind::add_residual:
            expect(n_inputs == 2, l.id, "add_residual takes exactly two inputs");
            expect(l.output_shape == in, l.id, "add_residual output shape differs from input");
            check_counts(l, 0, false);
            break;
        case LayerKind::conv2d:
            expect(n_inputs == 1, l.id, "conv2d takes exactly one input");
            check_window(l, l.out_channels);
            check_counts(l, std::int64_t{in.c} * l.out_channels * l.kernel_h * l.kernel_w, true);
            break;
        case LayerKind::pointwise_conv2d:
            expect(n_inputs == 1, l.id, "pointwise_conv2d takes exactly one input");
            expect(l.kernel_h == 1 && l.kernel_w == 1, l.id, "pointwise kernel must be 1x1");
            check_window(l, l.out_channels);
            check_counts(l, std::int64_t{in.c} * l.out_channels, true);
            break;
        case LayerKind::depthwise_conv2d:
            expect(n_inputs == 1, l.id, "depthwise_conv2d takes exactly one input");
            expect(l.out_channels == in.c, l.id, "depthwise out_channels must equal input channels");
            check_window(l, in.c);
            check_counts(l, std::int64_t{in.c} * l.kernel_h * l.kernel_w, true);
            break;
        case LayerKind::fully_connected:
            expect(n_inputs == 1, l.id, "fully_connected takes exactly one input");
            expect(l.output_shape == Shape{l.out_channels, 1, 1}, l.id,
                   "fully_connected output_shape must be [out_channels,1,1]");
            check_counts(l, in.numel() * l.out_channels, true);
            break;
        case LayerKind::avg_pool:
            expect(n_inputs == 1, l.id, "avg_pool takes exactly one input");
            check_window(l, in.c);
            check_counts(l, 0, false);
            break;
        case LayerKind::relu_clip:
            expect(n_inputs == 1, l.id, "relu_clip takes exactly one input");
            expect(l.output_shape == in, l.id, "relu_clip output shape differs from input");
            check_counts(l, 0, false);
            break;
    }
    if (l.kind != LayerKind::input && l.kind != LayerKind::output && l.kind != LayerKind::fully_connected) {
        expect(l.out_channels == l.output_shape.c, l.id, "out_channels disagrees with output_shape");
    }
}

Shape parse_shape(const json& j, LayerId id, const char* field) {
    if (!j.is_array() || j.size() != 3) {
        throw ParseError("layer " + std::to_string(id) + ": " + field + " must be a 3-element array");
    }
    return Shape{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

LayerSpec parse_layer(const json& j) {
    LayerSpec l;
    l.id = j.at("id").get<LayerId>();
    const auto kind_name = j.at("kind").get<std::string>();
    const auto kind = parse_layer_kind(kind_name);
    if (!kind) throw ParseError("layer " + std::to_string(l.id) + ": unknown kind '" + kind_name + "'");
    l.kind = *kind;
    l.input_ids = j.at("input_ids").get<std::vector<LayerId>>();
    l.out_channels = j.value("out_channels", 0);
    l.kernel_h = j.value("kernel_h", 1);
    l.kernel_w = j.value("kernel_w", 1);
    l.stride = j.value("stride", 1);
    l.padding = j.value("padding", 0);
    l.input_shape = parse_shape(j.at("input_shape"), l.id, "input_shape");
    l.output_shape = parse_shape(j.at("output_shape"), l.id, "output_shape");
    l.param_count = j.value("param_count", std::int64_t{0});
    l.bias_count = j.value("bias_count", std::int64_t{0});
    return l;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
    for (const auto& [k, name] : kKindNames) {
        if (k == kind) return name;
    }
    return "?";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) {
    for (const auto& [k, n] : kKindNames) {
        if (n == name) return k;
    }
    return std::nullopt;
}

bool LayerSpec::has_weights() const {
    switch (kind) {
        case LayerKind::conv2d:
        case LayerKind::depthwise_conv2d:
        case LayerKind::pointwise_conv2d:
        case LayerKind::fully_connected:
            return true;
        default:
            return false;
    }
}

int window_out(int in, int kernel, int stride, int padding) {
    const int span = in + 2 * padding - kernel;
    if (span < 0 || stride <= 0) return -1;
    return span / stride + 1;
}

NetworkGraph::NetworkGraph(std::vector<LayerSpec> layers, int resolution, double width_multiplier)
    : layers_(std::move(layers)), resolution_(resolution), width_multiplier_(width_multiplier) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        if (!index_.emplace(l.id, i).second) throw ValidationError(l.id, "duplicate layer id");
        consumers_[l.id];
    }
    for (const LayerSpec& l : layers_) {
        validate_layer(l);
        if (l.kind == LayerKind::input) {
            expect(input_id_ < 0, l.id, "graph has more than one input layer");
            input_id_ = l.id;
        } else if (l.kind == LayerKind::output) {
            expect(output_id_ < 0, l.id, "graph has more than one output layer");
            output_id_ = l.id;
        }
        for (LayerId src : l.input_ids) {
            expect(contains(src), l.id, "references unknown layer " + std::to_string(src));
            const LayerSpec& p = layers_[index_.at(src)];
            expect(p.kind != LayerKind::output, l.id, "consumes the output layer");
            expect(p.output_shape == l.input_shape, l.id,
                   "input_shape " + shape_str(l.input_shape) + " does not match output of layer " +
                       std::to_string(src) + " " + shape_str(p.output_shape));
            consumers_[src].push_back(l.id);
        }
    }
    if (input_id_ < 0) throw ValidationError(-1, "graph has no input layer");
    if (output_id_ < 0) throw ValidationError(-1, "graph has no output layer");
    for (auto& [id, cons] : consumers_) std::sort(cons.begin(), cons.end());

    // Kahn with a min-heap gives the smallest-id-first tie break.
    std::unordered_map<LayerId, std::size_t> pending;
    std::priority_queue<LayerId, std::vector<LayerId>, std::greater<>> ready;
    for (const LayerSpec& l : layers_) {
        pending[l.id] = l.input_ids.size();
        if (l.input_ids.empty()) ready.push(l.id);
    }
    while (!ready.empty()) {
        const LayerId id = ready.top();
        ready.pop();
        order_.push_back(id);
        for (LayerId c : consumers_.at(id)) {
            // duplicate edges (add(x, x)) are counted once per occurrence
            if (--pending[c] == 0) ready.push(c);
        }
    }
    if (order_.size() != layers_.size()) {
        LayerId culprit = -1;
        for (const LayerSpec& l : layers_) {
            if (pending[l.id] != 0 && (culprit < 0 || l.id < culprit)) culprit = l.id;
        }
        throw ValidationError(culprit, "graph contains a cycle");
    }
}

const LayerSpec& NetworkGraph::layer(LayerId id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError(id, "unknown layer id");
    return layers_[it->second];
}

const std::vector<LayerId>& NetworkGraph::consumers(LayerId id) const {
    const auto it = consumers_.find(id);
    if (it == consumers_.end()) throw ValidationError(id, "unknown layer id");
    return it->second;
}

LayerId NetworkGraph::logits_tensor() const { return layer(output_id_).input_ids.front(); }

std::vector<LayerId> NetworkGraph::weighted_layers() const {
    std::vector<LayerId> out;
    for (LayerId id : order_) {
        if (layer(id).has_weights()) out.push_back(id);
    }
    return out;
}

std::vector<LayerId> NetworkGraph::activation_tensors() const {
    std::vector<LayerId> out;
    for (LayerId id : order_) {
        if (layer(id).kind != LayerKind::output) out.push_back(id);
    }
    return out;
}

std::vector<LayerId> NetworkGraph::quantizable_activations() const {
    std::vector<LayerId> out;
    const LayerId logits = logits_tensor();
    for (LayerId id : activation_tensors()) {
        if (id != logits) out.push_back(id);
    }
    return out;
}

std::vector<LayerId> NetworkGraph::residual_tensors() const {
    std::set<LayerId> ids;
    for (const LayerSpec& l : layers_) {
        if (l.kind != LayerKind::add_residual) continue;
        ids.insert(l.id);
        ids.insert(l.input_ids.begin(), l.input_ids.end());
    }
    ids.erase(logits_tensor());
    return {ids.begin(), ids.end()};
}

std::int64_t NetworkGraph::total_params() const {
    std::int64_t n = 0;
    for (const LayerSpec& l : layers_) n += l.param_count;
    return n;
}

std::int64_t NetworkGraph::total_biases() const {
    std::int64_t n = 0;
    for (const LayerSpec& l : layers_) n += l.bias_count;
    return n;
}

NetworkGraph parse_graph(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("graph JSON: ") + e.what());
    }
    try {
        if (!doc.is_object()) throw ParseError("graph JSON: top level must be an object");
        std::vector<LayerSpec> layers;
        for (const json& j : doc.at("layers")) layers.push_back(parse_layer(j));
        return NetworkGraph(std::move(layers), doc.value("resolution", 0), doc.value("width_multiplier", 1.0));
    } catch (const json::exception& e) {
        throw ParseError(std::string("graph JSON: ") + e.what());
    }
}

NetworkGraph load_graph(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open graph file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_graph(ss.str());
}

std::string graph_to_json(const NetworkGraph& g) {
    json layers = json::array();
    for (const LayerSpec& l : g.layers()) {
        layers.push_back({
            {"id", l.id},
            {"kind", std::string(to_string(l.kind))},
            {"input_ids", l.input_ids},
            {"out_channels", l.out_channels},
            {"kernel_h", l.kernel_h},
            {"kernel_w", l.kernel_w},
            {"stride", l.stride},
            {"padding", l.padding},
            {"input_shape", {l.input_shape.c, l.input_shape.h, l.input_shape.w}},
            {"output_shape", {l.output_shape.c, l.output_shape.h, l.output_shape.w}},
            {"param_count", l.param_count},
            {"bias_count", l.bias_count},
        });
    }
    json doc{{"resolution", g.resolution()}, {"width_multiplier", g.width_multiplier()}, {"layers", layers}};
    return doc.dump(1);
}

std::vector<LayerId> topo_order(const NetworkGraph& g) { return g.order(); }

std::vector<LiveStep> liveness(const NetworkGraph& g) {
    const auto& order = g.order();
    std::unordered_map<LayerId, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;

    // [first, last] step interval per tensor
    std::vector<std::pair<std::size_t, std::size_t>> span(order.size());
    std::vector<bool> produces(order.size(), false);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const LayerId id = order[i];
        if (g.layer(id).kind == LayerKind::output) continue;
        produces[i] = true;
        std::size_t last = i;
        for (LayerId c : g.consumers(id)) last = std::max(last, pos.at(c));
        span[i] = {i, last};
    }

    std::vector<LiveStep> steps;
    steps.reserve(order.size());
    for (std::size_t s = 0; s < order.size(); ++s) {
        LiveStep step{order[s], {}};
        for (std::size_t t = 0; t < order.size(); ++t) {
            if (produces[t] && span[t].first <= s && s <= span[t].second) step.live.push_back(order[t]);
        }
        std::sort(step.live.begin(), step.live.end());
        steps.push_back(std::move(step));
    }
    return steps;
}

}  // namespace mpq
