#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mpq/memory_model.hpp"
#include "mpq/params.hpp"

namespace mpq {

/// Bit-packed integer tensor with one scale per output channel (axis 0).
struct QuantizedTensor {
    int bits = 8;
    bool is_signed = true;
    std::vector<int> shape;
    std::vector<float> scales;
    std::vector<std::uint8_t> packed;

    std::int64_t numel() const;
    std::int64_t channel_size() const { return numel() / static_cast<std::int64_t>(shape.empty() ? 1 : shape[0]); }
    std::vector<std::int32_t> codes() const;

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Integer requantization: value = sat(round(acc * multiplier / 2^shift) + out_zero).
struct RequantParams {
    std::int32_t multiplier = 0;
    std::int32_t shift = 0;
    std::int32_t out_zero = 0;

    friend bool operator==(const RequantParams&, const RequantParams&) = default;
};

inline std::int32_t qmin(int bits, bool is_signed) { return is_signed ? -(1 << (bits - 1)) : 0; }
inline std::int32_t qmax(int bits, bool is_signed) { return is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1; }

/// Activation step size for an unsigned `bits` code over [0, clip_max].
inline double act_scale(double clip_max, int bits) { return clip_max / static_cast<double>((1 << bits) - 1); }

/// Symmetric signed per-channel quantization; scale_c = max|w_c| / (2^(bits-1) - 1),
/// 1 for an all-zero channel. `shape[0]` is the channel axis.
QuantizedTensor quantize_weights_pc(std::span<const double> w, std::vector<int> shape, int bits);

std::vector<double> dequantize(const QuantizedTensor& q);

/// Forward fake-quantization of an unsigned activation:
/// round(clamp(x, 0, clip) / s) * s with s = clip / (2^bits - 1).
std::vector<double> fake_quant_act(std::span<const double> x, const ActRange& r, int bits);
double fake_quant_value(double x, double clip_max, int bits);
/// Integer code of the same quantizer.
std::int32_t act_code(double x, double clip_max, int bits);

struct FakeQuantGrad {
    std::vector<double> dx;
    double dclip = 0.0;
};

/// Straight-through backward: dx = dy inside [0, clip), 0 outside;
/// dclip accumulates dy where x >= clip (PACT).
FakeQuantGrad fake_quant_act_backward(std::span<const double> x, std::span<const double> dy, const ActRange& r);

/// Little-endian sub-byte packing: element i occupies bits [(i*bits) % 8, ...) of
/// byte (i*bits)/8; signed values are stored two's complement in their field.
std::vector<std::uint8_t> pack_subbyte(std::span<const std::int32_t> values, int bits, bool is_signed);
std::vector<std::int32_t> unpack_subbyte(std::span<const std::uint8_t> bytes, int bits, std::size_t n, bool is_signed);

/// Decomposes a positive real multiplier as m * 2^-shift with m in [2^30, 2^31).
RequantParams requant_from_multiplier(double real_multiplier);

/// Per-channel parameters for M_c = s_in * s_w[c] / s_out.
std::vector<RequantParams> compute_requant(double s_in, std::span<const float> s_w, double s_out);

/// round_half_away(acc * m / 2^shift), exact 64-bit integer arithmetic.
std::int64_t apply_multiplier(std::int64_t acc, const RequantParams& rq);
/// Requantize and saturate into [lo, hi].
std::int32_t requantize(std::int64_t acc, const RequantParams& rq, std::int32_t lo, std::int32_t hi);

/// Initial clip value from observed activations: 99.9th percentile
/// (linear interpolation between order statistics), floored at 1e-3.
double percentile_clip(std::vector<double> values, double percentile = 99.9);
inline constexpr double kMinClip = 1e-3;

// ---- deployable integer model ----

/// One executed layer of the integer model (the `output` marker is omitted).
struct IntLayer {
    LayerId id = 0;
    int out_bits = 0;        ///< 0: int32 logits, rescaled per channel onto the largest weight scale
    float out_clip = 0.0f;   ///< clip range of the produced tensor
    QuantizedTensor weights{0, true, {}, {}, {}};  ///< weighted layers only (bits = 0 otherwise)
    std::vector<RequantParams> requant;
    std::vector<std::int32_t> bias;

    bool has_weights() const { return weights.bits != 0; }

    friend bool operator==(const IntLayer&, const IntLayer&) = default;
};

struct IntModel {
    std::vector<IntLayer> layers;  ///< execution order

    const IntLayer& layer(LayerId id) const;
    friend bool operator==(const IntModel&, const IntModel&) = default;
};

/// Quantizes a float model under `policy` into an integer-only model.
/// Clip ranges are rounded to float32 so the serialized model is exact.
IntModel build_int_model(const NetworkGraph& g, const FloatModel& m, const QuantPolicy& policy);

/// Round every clip range to float32, the precision the packed model stores.
FloatModel freeze_ranges(FloatModel m);

/// Packed-model binary: "MPQ1", u32 layer count, then per layer
/// id, bits, shape, f32 scales, requant params, bias and packed payload (all LE).
std::vector<std::uint8_t> serialize_model(const IntModel& m);
IntModel deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const IntModel& m, const std::filesystem::path& path);
IntModel load_model(const std::filesystem::path& path);

}  // namespace mpq
