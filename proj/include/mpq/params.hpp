#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <vector>

#include "mpq/graph.hpp"

namespace mpq {

/// PACT-style clipping range of an activation tensor; the lower bound is 0.
struct ActRange {
    LayerId tensor_id = 0;
    double clip_max = 1.0;

    friend bool operator==(const ActRange&, const ActRange&) = default;
};

/// Float parameters of one weighted layer. Layouts:
///   conv2d / pointwise: [out][in][kh][kw]
///   depthwise:          [c][kh][kw]
///   fully_connected:    [out][c*h*w]
struct LayerParams {
    std::vector<double> weight;
    std::vector<double> bias;  ///< empty when the layer has no bias

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Full-precision model state: latent weights plus activation ranges.
struct FloatModel {
    std::map<LayerId, LayerParams> layers;
    std::map<LayerId, ActRange> ranges;

    friend bool operator==(const FloatModel&, const FloatModel&) = default;
};

/// Weight tensor dims with the output-channel axis first.
std::array<int, 4> weight_dims(const LayerSpec& layer);

/// He-style random initialization for every weighted layer; ranges left empty.
FloatModel init_float_model(const NetworkGraph& g, std::uint64_t seed);

/// Throws Error when a weighted layer is missing or has the wrong size.
void validate_float_model(const NetworkGraph& g, const FloatModel& m);

/// Versioned binary checkpoint ("MPQW", version 1).
void save_checkpoint(const FloatModel& m, const std::filesystem::path& path);
FloatModel load_checkpoint(const std::filesystem::path& path);

}  // namespace mpq
