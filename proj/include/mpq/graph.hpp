#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mpq/common.hpp"

namespace mpq {

enum class LayerKind {
    conv2d,
    depthwise_conv2d,
    pointwise_conv2d,
    fully_connected,
    add_residual,
    avg_pool,
    relu_clip,
    input,
    output,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view name);

/// (channels, height, width)
struct Shape {
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const { return std::int64_t{c} * h * w; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

struct LayerSpec {
    LayerId id = 0;
    LayerKind kind = LayerKind::input;
    std::vector<LayerId> input_ids;
    int out_channels = 0;
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int padding = 0;
    Shape input_shape;
    Shape output_shape;
    std::int64_t param_count = 0;
    std::int64_t bias_count = 0;

    /// True for kinds that carry a weight tensor.
    bool has_weights() const;
};

/// Validated, immutable layer DAG. Activation tensors are identified by the id
/// of the layer producing them; `output` layers produce no tensor.
class NetworkGraph {
public:
    /// Validates and indexes `layers`; throws ValidationError on any violation.
    NetworkGraph(std::vector<LayerSpec> layers, int resolution = 0, double width_multiplier = 1.0);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const LayerSpec& layer(LayerId id) const;
    bool contains(LayerId id) const { return index_.count(id) != 0; }
    int resolution() const { return resolution_; }
    double width_multiplier() const { return width_multiplier_; }

    LayerId input_id() const { return input_id_; }
    LayerId output_id() const { return output_id_; }
    /// Tensor feeding the output layer (the logits).
    LayerId logits_tensor() const;

    /// Deterministic execution order (Kahn, smallest ready id first).
    const std::vector<LayerId>& order() const { return order_; }
    /// Ids of layers consuming the tensor produced by `id`.
    const std::vector<LayerId>& consumers(LayerId id) const;

    /// Layers with weights, in execution order.
    std::vector<LayerId> weighted_layers() const;
    /// Every produced activation tensor (all layers except `output`), in execution order.
    std::vector<LayerId> activation_tensors() const;
    /// Activation tensors read by quantized compute: everything except the logits.
    std::vector<LayerId> quantizable_activations() const;
    /// Tensors adjacent to an add_residual (its inputs and its output).
    std::vector<LayerId> residual_tensors() const;

    std::int64_t total_params() const;
    std::int64_t total_biases() const;

private:
    std::vector<LayerSpec> layers_;
    std::unordered_map<LayerId, std::size_t> index_;
    std::unordered_map<LayerId, std::vector<LayerId>> consumers_;
    std::vector<LayerId> order_;
    int resolution_ = 0;
    double width_multiplier_ = 1.0;
    LayerId input_id_ = -1;
    LayerId output_id_ = -1;
};

/// Loads a graph JSON file. ParseError on malformed content, ValidationError otherwise.
NetworkGraph load_graph(const std::filesystem::path& path);
NetworkGraph parse_graph(std::string_view json_text);
std::string graph_to_json(const NetworkGraph& g);

/// Execution order; every layer appears after its inputs, ties by ascending id.
std::vector<LayerId> topo_order(const NetworkGraph& g);

/// One entry per layer in execution order.
struct LiveStep {
    LayerId layer = 0;
    std::vector<LayerId> live;  ///< sorted tensor ids resident while `layer` executes
};

/// Activation liveness along `topo_order`: a tensor is resident from the step
/// producing it through the step of its last consumer.
std::vector<LiveStep> liveness(const NetworkGraph& g);

/// Output spatial extent for a sliding window, or -1 when the window does not fit.
int window_out(int in, int kernel, int stride, int padding);

}  // namespace mpq
