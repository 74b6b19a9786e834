#include "mpq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "binary_io.hpp"

namespace mpq {

namespace {

void require_quant_bits(int bits) {
    if (!is_quant_bits(bits)) throw QuantError("unsupported bitwidth " + std::to_string(bits));
}

void require_clip(double clip) {
    if (!(clip > 0.0) || !std::isfinite(clip)) throw QuantError("clip_max must be finite and > 0");
}

std::int32_t checked_int32(long double v, const std::string& what) {
    if (v < std::numeric_limits<std::int32_t>::min() || v > std::numeric_limits<std::int32_t>::max()) {
        throw QuantError(what + " does not fit 32 bits");
    }
    return static_cast<std::int32_t>(v);
}

}  // namespace

std::int64_t QuantizedTensor::numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::vector<std::int32_t> QuantizedTensor::codes() const {
    return unpack_subbyte(packed, bits, static_cast<std::size_t>(numel()), is_signed);
}

QuantizedTensor quantize_weights_pc(std::span<const double> w, std::vector<int> shape, int bits) {
    require_quant_bits(bits);
    QuantizedTensor q;
    q.bits = bits;
    q.is_signed = true;
    q.shape = std::move(shape);
    if (q.shape.empty() || q.numel() != static_cast<std::int64_t>(w.size()) || q.shape[0] <= 0) {
        throw QuantError("weight shape does not match element count");
    }
    for (double v : w) {
        if (!std::isfinite(v)) throw QuantError("non-finite weight value");
    }
    const auto channels = static_cast<std::size_t>(q.shape[0]);
    const auto per = static_cast<std::size_t>(q.channel_size());
    const double levels = static_cast<double>((1 << (bits - 1)) - 1);
    const std::int32_t lo = qmin(bits, true);
    const std::int32_t hi = qmax(bits, true);
    std::vector<std::int32_t> codes(w.size());
    q.scales.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const auto chan = w.subspan(c * per, per);
        double max_abs = 0.0;
        for (double v : chan) max_abs = std::max(max_abs, std::abs(v));
        float scale = max_abs == 0.0 ? 1.0f : static_cast<float>(max_abs / levels);
        if (!(scale >= std::numeric_limits<float>::min())) scale = std::numeric_limits<float>::min();
        q.scales[c] = scale;
        for (std::size_t i = 0; i < per; ++i) {
            const double r = round_half_away(chan[i] / static_cast<double>(scale));
            codes[c * per + i] = static_cast<std::int32_t>(std::clamp<double>(r, lo, hi));
        }
    }
    q.packed = pack_subbyte(codes, bits, true);
    return q;
}

std::vector<double> dequantize(const QuantizedTensor& q) {
    const auto codes = q.codes();
    std::vector<double> out(codes.size());
    const auto per = static_cast<std::size_t>(q.channel_size());
    for (std::size_t i = 0; i < codes.size(); ++i) out[i] = codes[i] * static_cast<double>(q.scales[i / per]);
    return out;
}

std::int32_t act_code(double x, double clip_max, int bits) {
    const std::int32_t top = (1 << bits) - 1;
    if (std::isnan(x) || x <= 0.0) return 0;
    if (x >= clip_max) return top;
    const double r = round_half_away(x / act_scale(clip_max, bits));
    return static_cast<std::int32_t>(std::clamp<double>(r, 0, top));
}

double fake_quant_value(double x, double clip_max, int bits) {
    const std::int32_t code = act_code(x, clip_max, bits);
    // the top level is clip_max itself; code * scale can miss it by an ulp
    if (code == (1 << bits) - 1) return clip_max;
    return code * act_scale(clip_max, bits);
}

std::vector<double> fake_quant_act(std::span<const double> x, const ActRange& r, int bits) {
    require_quant_bits(bits);
    require_clip(r.clip_max);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fake_quant_value(x[i], r.clip_max, bits);
    return y;
}

FakeQuantGrad fake_quant_act_backward(std::span<const double> x, std::span<const double> dy, const ActRange& r) {
    require_clip(r.clip_max);
    FakeQuantGrad g;
    g.dx.assign(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] >= r.clip_max) {
            g.dclip += dy[i];
        } else if (x[i] >= 0.0) {
            g.dx[i] = dy[i];
        }
    }
    return g;
}

std::vector<std::uint8_t> pack_subbyte(std::span<const std::int32_t> values, int bits, bool is_signed) {
    require_quant_bits(bits);
    const std::int32_t lo = qmin(bits, is_signed);
    const std::int32_t hi = qmax(bits, is_signed);
    const std::uint32_t mask = (1u << bits) - 1u;
    std::vector<std::uint8_t> out(packed_bytes(values.size(), bits), 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::int32_t v = values[i];
        if (v < lo || v > hi) {
            throw QuantError("value " + std::to_string(v) + " outside " + std::to_string(bits) + "-bit range");
        }
        const std::size_t bit = i * static_cast<std::size_t>(bits);
        out[bit / 8] |= static_cast<std::uint8_t>((static_cast<std::uint32_t>(v) & mask) << (bit % 8));
    }
    return out;
}

std::vector<std::int32_t> unpack_subbyte(std::span<const std::uint8_t> bytes, int bits, std::size_t n,
                                         bool is_signed) {
    require_quant_bits(bits);
    if (bytes.size() < packed_bytes(n, bits)) throw QuantError("packed buffer too short");
    const std::uint32_t mask = (1u << bits) - 1u;
    const std::uint32_t sign = 1u << (bits - 1);
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t bit = i * static_cast<std::size_t>(bits);
        const std::uint32_t field = (static_cast<std::uint32_t>(bytes[bit / 8]) >> (bit % 8)) & mask;
        out[i] = is_signed && (field & sign) ? static_cast<std::int32_t>(field) - (1 << bits)
                                              : static_cast<std::int32_t>(field);
    }
    return out;
}

RequantParams requant_from_multiplier(double real_multiplier) {
    if (!(real_multiplier > 0.0) || !std::isfinite(real_multiplier)) {
        throw QuantError("requantization multiplier must be finite and > 0");
    }
    int exponent = 0;
    const double frac = std::frexp(real_multiplier, &exponent);  // [0.5, 1)
    auto m = static_cast<std::int64_t>(std::llround(std::ldexp(frac, 31)));
    int shift = 31 - exponent;
    if (m == (std::int64_t{1} << 31)) {
        m >>= 1;
        --shift;
    }
    if (shift < 0) throw QuantError("requantization multiplier too large for a non-negative shift");
    if (shift > 62) {
        // below 2^-32 the product no longer fits the 62-bit budget; trade precision for range
        m = std::llround(std::ldexp(real_multiplier, 62));
        shift = m == 0 ? 0 : 62;
    }
    return RequantParams{static_cast<std::int32_t>(m), shift, 0};
}

std::vector<RequantParams> compute_requant(double s_in, std::span<const float> s_w, double s_out) {
    if (!(s_in > 0.0) || !(s_out > 0.0)) throw QuantError("scales must be > 0");
    std::vector<RequantParams> out;
    out.reserve(s_w.size());
    for (float sw : s_w) {
        if (!(sw > 0.0f)) throw QuantError("scales must be > 0");
        out.push_back(requant_from_multiplier(s_in * static_cast<double>(sw) / s_out));
    }
    return out;
}

std::int64_t apply_multiplier(std::int64_t acc, const RequantParams& rq) {
    if (rq.multiplier == 0) return 0;
    const std::int64_t x = acc * rq.multiplier;
    if (rq.shift == 0) return x;
    const std::int64_t mag = x < 0 ? -x : x;
    const std::int64_t r = (mag + (std::int64_t{1} << (rq.shift - 1))) >> rq.shift;
    return x < 0 ? -r : r;
}

std::int32_t requantize(std::int64_t acc, const RequantParams& rq, std::int32_t lo, std::int32_t hi) {
    const std::int64_t v = apply_multiplier(acc, rq) + rq.out_zero;
    return static_cast<std::int32_t>(std::clamp<std::int64_t>(v, lo, hi));
}

double percentile_clip(std::vector<double> values, double percentile) {
    if (values.empty()) throw QuantError("empty calibration set");
    std::sort(values.begin(), values.end());
    const double pos = percentile / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double v = values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
    return std::max(v, kMinClip);
}

// ---- integer model ----

const IntLayer& IntModel::layer(LayerId id) const {
    for (const IntLayer& l : layers) {
        if (l.id == id) return l;
    }
    throw Error("integer model has no layer " + std::to_string(id));
}

FloatModel freeze_ranges(FloatModel m) {
    for (auto& [id, r] : m.ranges) r.clip_max = static_cast<double>(static_cast<float>(r.clip_max));
    return m;
}

IntModel build_int_model(const NetworkGraph& g, const FloatModel& float_model, const QuantPolicy& policy) {
    validate_policy(g, policy);
    validate_float_model(g, float_model);
    const FloatModel m = freeze_ranges(float_model);
    const LayerId logits = g.logits_tensor();

    auto range_of = [&](LayerId t) {
        const auto it = m.ranges.find(t);
        if (it == m.ranges.end()) throw QuantError("no activation range for tensor " + std::to_string(t));
        require_clip(it->second.clip_max);
        return it->second.clip_max;
    };
    auto bits_of = [&](LayerId t) {
        const int b = policy.act_bits.at(t);
        if (!is_quant_bits(b)) {
            throw QuantError("integer model needs quantized activations; tensor " + std::to_string(t) + " is " +
                             std::to_string(b) + "-bit");
        }
        return b;
    };
    auto scale_of = [&](LayerId t) { return act_scale(range_of(t), bits_of(t)); };

    IntModel model;
    for (LayerId id : g.order()) {
        const LayerSpec& l = g.layer(id);
        if (l.kind == LayerKind::output) continue;
        IntLayer il;
        il.id = id;
        if (id != logits) {
            il.out_bits = bits_of(id);
            il.out_clip = static_cast<float>(range_of(id));
        }
        const double s_out = id != logits ? scale_of(id) : 0.0;

        if (l.has_weights()) {
            const int wbits = policy.weight_bits.at(id);
            require_quant_bits(wbits);
            const auto d = weight_dims(l);
            const LayerParams& p = m.layers.at(id);
            il.weights = quantize_weights_pc(p.weight, {d[0], d[1], d[2], d[3]}, wbits);
            const double s_in = scale_of(l.input_ids[0]);
            if (!p.bias.empty()) {
                il.bias.resize(p.bias.size());
                for (std::size_t c = 0; c < p.bias.size(); ++c) {
                    const double step = s_in * static_cast<double>(il.weights.scales[c]);
                    il.bias[c] = checked_int32(round_half_away(static_cast<long double>(p.bias[c] / step)),
                                               "bias of layer " + std::to_string(id));
                }
            }
            if (id != logits) {
                il.requant = compute_requant(s_in, il.weights.scales, s_out);
            } else {
                // bring per-channel accumulators onto the coarsest channel's grid so argmax compares like with like
                const float s_max = *std::max_element(il.weights.scales.begin(), il.weights.scales.end());
                for (float sw : il.weights.scales) {
                    il.requant.push_back(requant_from_multiplier(static_cast<double>(sw) / s_max));
                }
            }
        } else if (l.kind != LayerKind::input) {
            if (id == logits) throw QuantError("logits must be produced by a weighted layer");
            switch (l.kind) {
                case LayerKind::add_residual:
                    for (LayerId src : l.input_ids) il.requant.push_back(requant_from_multiplier(scale_of(src) / s_out));
                    break;
                case LayerKind::avg_pool:
                    il.requant.push_back(requant_from_multiplier(
                        scale_of(l.input_ids[0]) / (s_out * l.kernel_h * l.kernel_w)));
                    break;
                default:  // relu_clip
                    il.requant.push_back(requant_from_multiplier(scale_of(l.input_ids[0]) / s_out));
                    break;
            }
        }
        model.layers.push_back(std::move(il));
    }
    return model;
}

std::vector<std::uint8_t> serialize_model(const IntModel& m) {
    detail::ByteWriter w;
    w.tag("MPQ1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.layers.size()));
    for (const IntLayer& l : m.layers) {
        w.put<std::int32_t>(l.id);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.weights.bits));
        w.put<std::uint8_t>(l.weights.is_signed ? 1 : 0);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.out_bits));
        w.put<float>(l.out_clip);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.weights.shape.size()));
        for (int d : l.weights.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.weights.scales.size()));
        for (float s : l.weights.scales) w.put<float>(s);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.requant.size()));
        for (const RequantParams& rq : l.requant) {
            w.put<std::int32_t>(rq.multiplier);
            w.put<std::int32_t>(rq.shift);
            w.put<std::int32_t>(rq.out_zero);
        }
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.bias.size()));
        for (std::int32_t b : l.bias) w.put<std::int32_t>(b);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.weights.packed.size()));
        w.raw(l.weights.packed);
    }
    return std::move(w.bytes());
}

IntModel deserialize_model(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "packed model");
    r.expect_tag("MPQ1");
    IntModel m;
    const std::size_t n = r.count(16);
    for (std::size_t i = 0; i < n; ++i) {
        IntLayer l;
        l.id = r.get<std::int32_t>();
        l.weights.bits = r.get<std::uint8_t>();
        l.weights.is_signed = r.get<std::uint8_t>() != 0;
        l.out_bits = r.get<std::uint8_t>();
        l.out_clip = r.get<float>();
        const auto ndim = r.get<std::uint8_t>();
        for (int d = 0; d < ndim; ++d) l.weights.shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
        l.weights.scales.resize(r.count(4));
        for (float& s : l.weights.scales) s = r.get<float>();
        l.requant.resize(r.count(12));
        for (RequantParams& rq : l.requant) {
            rq.multiplier = r.get<std::int32_t>();
            rq.shift = r.get<std::int32_t>();
            rq.out_zero = r.get<std::int32_t>();
        }
        l.bias.resize(r.count(4));
        for (std::int32_t& b : l.bias) b = r.get<std::int32_t>();
        const auto payload = r.raw(r.count(1));
        l.weights.packed.assign(payload.begin(), payload.end());
        if (l.weights.bits != 0) {
            require_quant_bits(l.weights.bits);
            if (l.weights.packed.size() != packed_bytes(static_cast<std::size_t>(l.weights.numel()), l.weights.bits)) {
                throw ParseError("packed model: payload size mismatch in layer " + std::to_string(l.id));
            }
        }
        m.layers.push_back(std::move(l));
    }
    if (!r.done()) throw ParseError("packed model: trailing bytes");
    return m;
}

void save_model(const IntModel& m, const std::filesystem::path& path) {
    detail::write_file(path.string(), serialize_model(m));
}

IntModel load_model(const std::filesystem::path& path) {
    return deserialize_model(detail::read_file(path.string(), "packed model"));
}

}  // namespace mpq
