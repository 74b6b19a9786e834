#include "mpq/inference.hpp"

#include <limits>
#include <sstream>

#include "kernels.hpp"

namespace mpq {

namespace {

void check_acc(std::span<const std::int64_t> acc, LayerId id) {
    for (std::int64_t v : acc) {
        if (v < std::numeric_limits<std::int32_t>::min() || v > std::numeric_limits<std::int32_t>::max()) {
            throw Error("layer " + std::to_string(id) + ": accumulator overflows 32 bits");
        }
    }
}

std::vector<std::int64_t> accumulate_codes(const LayerSpec& l, std::span<const std::vector<std::int32_t>> in,
                                           std::span<const std::int32_t> w, const IntLayer& il, bool checked) {
    std::vector<std::int64_t> acc(static_cast<std::size_t>(l.output_shape.numel()), 0);
    const auto geo = detail::Geometry::of(l);
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::pointwise_conv2d:
        case LayerKind::depthwise_conv2d: {
            const int plane = l.output_shape.h * l.output_shape.w;
            for (std::size_t c = 0; c < il.bias.size(); ++c) {
                std::fill_n(acc.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, il.bias[c]);
            }
            detail::conv_forward(geo, in[0].data(), w.data(), acc.data());
            break;
        }
        case LayerKind::fully_connected:
            std::copy(il.bias.begin(), il.bias.end(), acc.begin());
            detail::dense_forward(static_cast<int>(l.input_shape.numel()), l.out_channels, in[0].data(), w.data(),
                                  acc.data());
            break;
        case LayerKind::avg_pool:
            detail::pool_sum(geo, in[0].data(), acc.data());
            break;
        default:
            return {};
    }
    if (checked) check_acc(acc, l.id);
    return acc;
}

std::vector<std::int32_t> layer_codes(const LayerSpec& l, std::span<const std::vector<std::int32_t>> in,
                                      std::span<const std::int32_t> w, const IntLayer& il, bool checked) {
    const std::int32_t hi = qmax(il.out_bits, false);
    const auto numel = static_cast<std::size_t>(l.output_shape.numel());
    std::vector<std::int32_t> out(numel);
    switch (l.kind) {
        case LayerKind::add_residual:
            for (std::size_t k = 0; k < numel; ++k) {
                std::int64_t s = 0;
                for (std::size_t i = 0; i < in.size(); ++i) s += apply_multiplier(in[i][k], il.requant[i]);
                out[k] = static_cast<std::int32_t>(std::clamp<std::int64_t>(s, 0, hi));
            }
            break;
        case LayerKind::relu_clip:
            for (std::size_t k = 0; k < numel; ++k) out[k] = requantize(in[0][k], il.requant[0], 0, hi);
            break;
        default: {
            const auto acc = accumulate_codes(l, in, w, il, checked);
            const std::size_t plane = numel / il.requant.size();
            for (std::size_t k = 0; k < numel; ++k) out[k] = requantize(acc[k], il.requant[k / plane], 0, hi);
            break;
        }
    }
    return out;
}

/// Integer model with weight codes unpacked once.
class Runner {
public:
    Runner(const NetworkGraph& g, const IntModel& m) : g_(g), m_(m) {
        check_model_matches(g, m);
        for (const IntLayer& il : m.layers) {
            weights_.push_back(il.has_weights() ? il.weights.codes() : std::vector<std::int32_t>{});
            pos_[il.id] = weights_.size() - 1;
        }
    }

    IntResult run(std::span<const double> image, bool keep_codes) const {
        std::vector<std::vector<std::int32_t>> codes(m_.layers.size());
        IntResult res;
        const LayerId logits = g_.logits_tensor();
        std::vector<std::vector<std::int32_t>> in;
        for (std::size_t i = 0; i < m_.layers.size(); ++i) {
            const IntLayer& il = m_.layers[i];
            const LayerSpec& l = g_.layer(il.id);
            if (l.kind == LayerKind::input) {
                if (image.size() != static_cast<std::size_t>(l.output_shape.numel())) {
                    throw Error("image size does not match the graph input");
                }
                codes[i].resize(image.size());
                for (std::size_t k = 0; k < image.size(); ++k) codes[i][k] = act_code(image[k], il.out_clip, il.out_bits);
            } else {
                in.clear();
                for (LayerId src : l.input_ids) in.push_back(codes[pos_.at(src)]);
                if (il.id == logits) {
                    const auto acc = accumulate_codes(l, in, weights_[i], il, true);
                    const auto plane = static_cast<std::size_t>(l.output_shape.h) * static_cast<std::size_t>(l.output_shape.w);
                    res.scores.resize(acc.size());
                    for (std::size_t k = 0; k < acc.size(); ++k) {
                        res.scores[k] = static_cast<std::int32_t>(apply_multiplier(acc[k], il.requant[k / plane]));
                    }
                } else {
                    codes[i] = layer_codes(l, in, weights_[i], il, true);
                }
            }
        }
        res.argmax = argmax<std::int32_t>(res.scores);
        if (keep_codes) {
            for (std::size_t i = 0; i < m_.layers.size(); ++i) {
                if (m_.layers[i].id != logits) res.codes[m_.layers[i].id] = std::move(codes[i]);
            }
        }
        return res;
    }

private:
    const NetworkGraph& g_;
    const IntModel& m_;
    std::vector<std::vector<std::int32_t>> weights_;
    std::map<LayerId, std::size_t> pos_;
};

Accuracy tally(const Dataset& d, auto&& predict) {
    if (d.size() == 0) throw Error("cannot evaluate on an empty dataset");
    Accuracy a;
    a.correct.assign(static_cast<std::size_t>(d.num_classes), 0);
    a.total.assign(static_cast<std::size_t>(d.num_classes), 0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto label = static_cast<std::size_t>(d.labels[i]);
        ++a.total[label];
        if (predict(d.image(i)) == d.labels[i]) {
            ++a.correct[label];
            ++hits;
        }
    }
    a.top1 = static_cast<double>(hits) / static_cast<double>(d.size());
    return a;
}

}  // namespace

std::vector<std::int32_t> IntActivation::codes() const {
    return unpack_subbyte(packed, bits, static_cast<std::size_t>(shape.numel()), false);
}

IntActivation IntActivation::from_codes(LayerId id, int bits, Shape shape, ActRange range,
                                        std::span<const std::int32_t> codes) {
    if (codes.size() != static_cast<std::size_t>(shape.numel())) throw Error("activation size does not match shape");
    return IntActivation{id, bits, shape, range, pack_subbyte(codes, bits, false)};
}

std::vector<std::int64_t> accumulate_int(const LayerSpec& layer, std::span<const IntActivation> inputs,
                                         const IntLayer& il, bool checked) {
    std::vector<std::vector<std::int32_t>> in;
    for (const IntActivation& a : inputs) in.push_back(a.codes());
    const auto w = il.has_weights() ? il.weights.codes() : std::vector<std::int32_t>{};
    return accumulate_codes(layer, in, w, il, checked);
}

IntActivation run_layer_int(const LayerSpec& layer, std::span<const IntActivation> inputs, const IntLayer& il,
                            bool checked) {
    if (!is_quant_bits(il.out_bits)) throw Error("layer " + std::to_string(layer.id) + " has no quantized output");
    if (inputs.size() != layer.input_ids.size()) throw Error("wrong number of inputs for layer " + std::to_string(layer.id));
    std::vector<std::vector<std::int32_t>> in;
    for (const IntActivation& a : inputs) in.push_back(a.codes());
    const auto w = il.has_weights() ? il.weights.codes() : std::vector<std::int32_t>{};
    const auto out = layer_codes(layer, in, w, il, checked);
    return IntActivation::from_codes(layer.id, il.out_bits, layer.output_shape, {layer.id, il.out_clip}, out);
}

IntActivation quantize_input(const LayerSpec& input_layer, const IntLayer& il, std::span<const double> image) {
    std::vector<std::int32_t> codes(image.size());
    for (std::size_t k = 0; k < image.size(); ++k) codes[k] = act_code(image[k], il.out_clip, il.out_bits);
    return IntActivation::from_codes(input_layer.id, il.out_bits, input_layer.output_shape,
                                     {input_layer.id, il.out_clip}, codes);
}

void check_model_matches(const NetworkGraph& g, const IntModel& m) {
    std::vector<LayerId> expected;
    for (LayerId id : g.order()) {
        if (g.layer(id).kind != LayerKind::output) expected.push_back(id);
    }
    if (m.layers.size() != expected.size()) throw Error("model/graph mismatch: layer count differs");
    const LayerId logits = g.logits_tensor();
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const IntLayer& il = m.layers[i];
        const LayerSpec& l = g.layer(expected[i]);
        const std::string where = "model/graph mismatch at layer " + std::to_string(l.id);
        if (il.id != l.id) throw Error(where + ": unexpected id " + std::to_string(il.id));
        if (l.has_weights() != il.has_weights()) throw Error(where + ": weight presence differs");
        if ((il.id == logits) != (il.out_bits == 0) || (il.out_bits != 0 && !is_quant_bits(il.out_bits))) {
            throw Error(where + ": bad output bitwidth");
        }
        if (il.out_bits != 0 && !(il.out_clip > 0.0f)) throw Error(where + ": bad clip range");
        std::size_t want_rq = 0;
        if (l.has_weights()) {
            const auto d = weight_dims(l);
            if (il.weights.shape != std::vector<int>{d[0], d[1], d[2], d[3]}) throw Error(where + ": weight shape differs");
            if (il.weights.scales.size() != static_cast<std::size_t>(d[0])) throw Error(where + ": scale count differs");
            if (il.weights.packed.size() != packed_bytes(static_cast<std::size_t>(il.weights.numel()), il.weights.bits)) {
                throw Error(where + ": payload size differs");
            }
            if (il.bias.size() != static_cast<std::size_t>(l.bias_count)) throw Error(where + ": bias count differs");
            want_rq = static_cast<std::size_t>(d[0]);
        } else if (l.kind == LayerKind::add_residual) {
            want_rq = l.input_ids.size();
        } else if (l.kind != LayerKind::input) {
            want_rq = 1;
        }
        if (il.requant.size() != want_rq) throw Error(where + ": requantization parameter count differs");
    }
}

IntResult run_network_int(const NetworkGraph& g, const IntModel& m, std::span<const double> image, bool keep_codes) {
    return Runner(g, m).run(image, keep_codes);
}

std::string Accuracy::per_class_csv() const {
    std::ostringstream os;
    os << "class,total,correct,accuracy\n";
    for (std::size_t c = 0; c < total.size(); ++c) {
        const double acc = total[c] ? static_cast<double>(correct[c]) / static_cast<double>(total[c]) : 0.0;
        os << c << ',' << total[c] << ',' << correct[c] << ',' << acc << '\n';
    }
    return os.str();
}

Accuracy evaluate_accuracy(const NetworkGraph& g, const IntModel& m, const Dataset& d) {
    const Runner runner(g, m);
    return tally(d, [&](std::span<const double> img) { return runner.run(img, false).argmax; });
}

Accuracy evaluate_accuracy(const NetworkGraph& g, const FloatModel& m, const ForwardConfig& cfg, const Dataset& d) {
    const Engine engine(g);
    const auto prepared = engine.prepare(m, cfg);
    Engine::Tape tape;
    return tally(d, [&](std::span<const double> img) {
        engine.forward(prepared, img, tape);
        return argmax(engine.logits(tape));
    });
}

}  // namespace mpq
