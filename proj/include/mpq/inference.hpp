#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/engine.hpp"
#include "mpq/quantizer.hpp"

namespace mpq {

/// Unsigned activation codes for one tensor, bit-packed.
struct IntActivation {
    LayerId tensor_id = 0;
    int bits = 8;
    Shape shape;
    ActRange range;
    std::vector<std::uint8_t> packed;

    std::vector<std::int32_t> codes() const;
    static IntActivation from_codes(LayerId id, int bits, Shape shape, ActRange range,
                                    std::span<const std::int32_t> codes);
};

/// Raw 64-bit accumulators of one layer: Σ q_x·q_w + bias for weighted layers,
/// window sums for avg_pool, nothing for other kinds. With `checked`, any value
/// outside int32 throws Error (the backends accumulate in 32 bits).
std::vector<std::int64_t> accumulate_int(const LayerSpec& layer, std::span<const IntActivation> inputs,
                                         const IntLayer& il, bool checked = true);

/// Executes one non-logits layer in the integer domain.
IntActivation run_layer_int(const LayerSpec& layer, std::span<const IntActivation> inputs, const IntLayer& il,
                            bool checked = true);

/// Quantizes an image with the input tensor's range.
IntActivation quantize_input(const LayerSpec& input_layer, const IntLayer& il, std::span<const double> image);

struct IntResult {
    std::vector<std::int32_t> scores;  ///< logits on a common per-model grid
    int argmax = 0;
    /// Codes of every produced tensor (filled when requested).
    std::map<LayerId, std::vector<std::int32_t>> codes;
};

/// Throws Error when the model does not describe `g` layer for layer.
void check_model_matches(const NetworkGraph& g, const IntModel& m);

IntResult run_network_int(const NetworkGraph& g, const IntModel& m, std::span<const double> image,
                          bool keep_codes = false);

/// Index of the largest score, lowest index on ties.
template <typename T>
int argmax(std::span<const T> v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

struct Accuracy {
    double top1 = 0.0;
    std::vector<std::size_t> correct;  ///< per class
    std::vector<std::size_t> total;    ///< per class

    /// `class,total,correct,accuracy` rows.
    std::string per_class_csv() const;
};

/// Integer-model accuracy; throws Error on an empty dataset.
Accuracy evaluate_accuracy(const NetworkGraph& g, const IntModel& m, const Dataset& d);
/// Float (optionally fake-quantized) accuracy.
Accuracy evaluate_accuracy(const NetworkGraph& g, const FloatModel& m, const ForwardConfig& cfg, const Dataset& d);

}  // namespace mpq
