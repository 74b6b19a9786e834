#include "mpq/engine.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"
#include "mpq/quantizer.hpp"

namespace mpq {

using detail::Geometry;

Engine::Engine(const NetworkGraph& g) : g_(g), order_(g.order()) {
    inputs_.resize(order_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) {
        for (LayerId src : g_.layer(order_[i]).input_ids) inputs_[i].push_back(position(src));
    }
    logits_pos_ = position(g_.logits_tensor());
}

std::size_t Engine::position(LayerId id) const {
    const auto it = std::find(order_.begin(), order_.end(), id);
    if (it == order_.end()) throw Error("unknown layer " + std::to_string(id));
    return static_cast<std::size_t>(it - order_.begin());
}

Engine::Prepared Engine::prepare(const FloatModel& m, const ForwardConfig& cfg) const {
    if (cfg.mode != ActMode::float_relu && cfg.policy == nullptr) throw Error("quantized forward needs a policy");
    const std::size_t n = order_.size();
    Prepared p;
    p.weight.resize(n);
    p.bias.resize(n);
    p.stage.resize(n);
    p.add_grid.assign(n, 0.0);

    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = g_.layer(order_[i]);
        Stage& st = p.stage[i];
        if (l.kind == LayerKind::output || i == logits_pos_) continue;
        if (cfg.mode == ActMode::float_relu) {
            st.kind = Stage::relu;
            continue;
        }
        const auto bits_it = cfg.policy->act_bits.find(l.id);
        if (bits_it == cfg.policy->act_bits.end()) {
            throw PolicyError("no activation bits for tensor " + std::to_string(l.id));
        }
        st.bits = bits_it->second;
        if (st.bits == 32) {
            st.kind = Stage::relu;
            continue;
        }
        const auto r = m.ranges.find(l.id);
        if (r == m.ranges.end()) throw Error("no activation range for tensor " + std::to_string(l.id));
        st.clip = r->second.clip_max;
        st.kind = cfg.mode == ActMode::surrogate ? Stage::clamp : Stage::quant;
    }

    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = g_.layer(order_[i]);
        if (l.kind == LayerKind::add_residual && p.stage[i].kind == Stage::quant) {
            p.add_grid[i] = act_scale(p.stage[i].clip, p.stage[i].bits);
        }
        if (!l.has_weights()) continue;
        const auto it = m.layers.find(l.id);
        if (it == m.layers.end()) throw Error("model has no parameters for layer " + std::to_string(l.id));
        p.weight[i] = it->second.weight;
        p.bias[i] = it->second.bias;
        if (cfg.mode != ActMode::fake_quant) continue;
        const int wbits = cfg.policy->weight_bits.at(l.id);
        if (wbits == 32) continue;
        const auto d = weight_dims(l);
        const QuantizedTensor q = quantize_weights_pc(it->second.weight, {d[0], d[1], d[2], d[3]}, wbits);
        p.weight[i] = dequantize(q);
        const Stage& in_stage = p.stage[inputs_[i][0]];
        if (in_stage.kind == Stage::quant) {
            const double s_in = act_scale(in_stage.clip, in_stage.bits);
            for (std::size_t c = 0; c < p.bias[i].size(); ++c) {
                const double step = s_in * static_cast<double>(q.scales[c]);
                p.bias[i][c] = round_half_away(p.bias[i][c] / step) * step;
            }
        }
    }
    return p;
}

void Engine::forward(const Prepared& p, std::span<const double> image, Tape& tape) const {
    const std::size_t n = order_.size();
    tape.pre.resize(n);
    tape.post.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = g_.layer(order_[i]);
        std::vector<double>& z = tape.pre[i];
        if (l.kind == LayerKind::output) {
            z.clear();
            tape.post[i].clear();
            continue;
        }
        const auto numel = static_cast<std::size_t>(l.output_shape.numel());
        const Geometry geo = Geometry::of(l);
        switch (l.kind) {
            case LayerKind::input:
                if (image.size() != numel) throw Error("image size does not match the graph input");
                z.assign(image.begin(), image.end());
                break;
            case LayerKind::conv2d:
            case LayerKind::pointwise_conv2d:
            case LayerKind::depthwise_conv2d: {
                z.assign(numel, 0.0);
                const int plane = l.output_shape.h * l.output_shape.w;
                if (!p.bias[i].empty()) {
                    for (int c = 0; c < l.output_shape.c; ++c) {
                        std::fill_n(z.begin() + static_cast<std::ptrdiff_t>(c) * plane, plane, p.bias[i][c]);
                    }
                }
                detail::conv_forward(geo, tape.post[inputs_[i][0]].data(), p.weight[i].data(), z.data());
                break;
            }
            case LayerKind::fully_connected:
                z.assign(numel, 0.0);
                if (!p.bias[i].empty()) std::copy(p.bias[i].begin(), p.bias[i].end(), z.begin());
                detail::dense_forward(static_cast<int>(l.input_shape.numel()), l.out_channels,
                                      tape.post[inputs_[i][0]].data(), p.weight[i].data(), z.data());
                break;
            case LayerKind::add_residual: {
                z.assign(numel, 0.0);
                const double grid = p.add_grid[i];
                for (std::size_t src : inputs_[i]) {
                    const auto& a = tape.post[src];
                    for (std::size_t k = 0; k < numel; ++k) {
                        z[k] += grid > 0.0 ? round_half_away(a[k] / grid) * grid : a[k];
                    }
                }
                break;
            }
            case LayerKind::avg_pool: {
                z.assign(numel, 0.0);
                detail::pool_sum(geo, tape.post[inputs_[i][0]].data(), z.data());
                const double inv = 1.0 / (l.kernel_h * l.kernel_w);
                for (double& v : z) v *= inv;
                break;
            }
            case LayerKind::relu_clip:
                z = tape.post[inputs_[i][0]];
                break;
            case LayerKind::output:
                break;
        }
        const Stage& st = p.stage[i];
        std::vector<double>& a = tape.post[i];
        a.resize(numel);
        switch (st.kind) {
            case Stage::none:
                std::copy(z.begin(), z.end(), a.begin());
                break;
            case Stage::relu:
                for (std::size_t k = 0; k < numel; ++k) a[k] = z[k] > 0.0 ? z[k] : 0.0;
                break;
            case Stage::clamp:
                for (std::size_t k = 0; k < numel; ++k) a[k] = std::clamp(z[k], 0.0, st.clip);
                break;
            case Stage::quant:
                for (std::size_t k = 0; k < numel; ++k) a[k] = fake_quant_value(z[k], st.clip, st.bits);
                break;
        }
    }
}

std::span<const double> Engine::logits(const Tape& tape) const { return tape.post[logits_pos_]; }

Engine::Gradients Engine::make_gradients() const {
    Gradients gr;
    const std::size_t n = order_.size();
    gr.weight.resize(n);
    gr.bias.resize(n);
    gr.clip.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = g_.layer(order_[i]);
        gr.weight[i].assign(static_cast<std::size_t>(l.param_count), 0.0);
        gr.bias[i].assign(static_cast<std::size_t>(l.bias_count), 0.0);
    }
    return gr;
}

void Engine::Gradients::zero() {
    for (auto& v : weight) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : bias) std::fill(v.begin(), v.end(), 0.0);
    std::fill(clip.begin(), clip.end(), 0.0);
}

void Engine::backward(const Prepared& p, const Tape& tape, std::span<const double> dlogits, Gradients& grads) const {
    const std::size_t n = order_.size();
    std::vector<std::vector<double>> dpost(n);
    for (std::size_t i = 0; i < n; ++i) dpost[i].assign(tape.post[i].size(), 0.0);
    std::copy(dlogits.begin(), dlogits.end(), dpost[logits_pos_].begin());

    std::vector<double> dz;
    for (std::size_t i = n; i-- > 0;) {
        const LayerSpec& l = g_.layer(order_[i]);
        if (l.kind == LayerKind::output) continue;
        const std::vector<double>& z = tape.pre[i];
        const std::vector<double>& da = dpost[i];
        const Stage& st = p.stage[i];
        dz.assign(z.size(), 0.0);
        switch (st.kind) {
            case Stage::none:
                dz = da;
                break;
            case Stage::relu:
                for (std::size_t k = 0; k < z.size(); ++k) dz[k] = z[k] > 0.0 ? da[k] : 0.0;
                break;
            case Stage::clamp:
            case Stage::quant:
                for (std::size_t k = 0; k < z.size(); ++k) {
                    if (z[k] >= st.clip) {
                        grads.clip[i] += da[k];
                    } else if (z[k] >= 0.0) {
                        dz[k] = da[k];
                    }
                }
                break;
        }

        const Geometry geo = Geometry::of(l);
        switch (l.kind) {
            case LayerKind::input:
            case LayerKind::output:
                break;
            case LayerKind::conv2d:
            case LayerKind::pointwise_conv2d:
            case LayerKind::depthwise_conv2d: {
                const int plane = l.output_shape.h * l.output_shape.w;
                auto& gb = grads.bias[i];
                for (std::size_t c = 0; c < gb.size(); ++c) {
                    double s = 0.0;
                    for (int k = 0; k < plane; ++k) s += dz[c * plane + k];
                    gb[c] += s;
                }
                const std::size_t src = inputs_[i][0];
                detail::conv_backward_weight(geo, tape.post[src].data(), dz.data(), grads.weight[i].data());
                detail::conv_backward_input(geo, dz.data(), p.weight[i].data(), dpost[src].data());
                break;
            }
            case LayerKind::fully_connected: {
                const std::size_t src = inputs_[i][0];
                const auto& x = tape.post[src];
                auto& dx = dpost[src];
                const std::size_t n_in = x.size();
                auto& gb = grads.bias[i];
                for (std::size_t o = 0; o < dz.size(); ++o) {
                    const double d = dz[o];
                    if (!gb.empty()) gb[o] += d;
                    if (d == 0.0) continue;
                    double* gw = grads.weight[i].data() + o * n_in;
                    const double* w = p.weight[i].data() + o * n_in;
                    for (std::size_t k = 0; k < n_in; ++k) {
                        gw[k] += d * x[k];
                        dx[k] += d * w[k];
                    }
                }
                break;
            }
            case LayerKind::add_residual:
                for (std::size_t src : inputs_[i]) {
                    auto& dx = dpost[src];
                    for (std::size_t k = 0; k < dz.size(); ++k) dx[k] += dz[k];
                }
                break;
            case LayerKind::avg_pool:
                detail::pool_backward(geo, dz.data(), 1.0 / (l.kernel_h * l.kernel_w), dpost[inputs_[i][0]].data());
                break;
            case LayerKind::relu_clip: {
                auto& dx = dpost[inputs_[i][0]];
                for (std::size_t k = 0; k < dz.size(); ++k) dx[k] += dz[k];
                break;
            }
        }
    }
}

std::vector<double> run_network_float(const NetworkGraph& g, const FloatModel& m, std::span<const double> image,
                                      const ForwardConfig& cfg) {
    const Engine engine(g);
    const Engine::Prepared p = engine.prepare(m, cfg);
    Engine::Tape tape;
    engine.forward(p, image, tape);
    const auto out = engine.logits(tape);
    return {out.begin(), out.end()};
}

}  // namespace mpq
