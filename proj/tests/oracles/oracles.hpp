#pragma once

// Independent reference implementations for the tests. Nothing here calls the
// code under test except for building inputs (graphs, policies).

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "mpq/graph.hpp"
#include "mpq/memory_model.hpp"

namespace oracle {

using mpq::LayerId;
using mpq::LayerKind;
using mpq::LayerSpec;
using mpq::NetworkGraph;
using mpq::QuantPolicy;
using mpq::Rng;
using mpq::Shape;

// ---------------------------------------------------------------- graphs

inline int out_extent(int in, int k, int s, int p) { return in + 2 * p < k ? 0 : (in + 2 * p - k) / s + 1; }

struct GraphOptions {
    int nodes = 6;               ///< including input and output
    int max_channels = 4;
    int max_extent = 6;
    bool weighted_logits = false;  ///< last compute layer carries weights
    bool allow_fc = true;
};

/// Random valid DAG. Ids are a shuffled, gapped permutation so that execution
/// order is not the file order.
inline NetworkGraph random_graph(Rng& rng, const GraphOptions& opt) {
    const int n = std::max(opt.nodes, opt.weighted_logits ? 3 : 2);
    std::vector<LayerId> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    rng.shuffle(ids);
    for (LayerId& id : ids) id = id * 3 + 1;

    std::vector<LayerSpec> layers;
    auto pick_channels = [&] { return 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_channels))); };

    LayerSpec in;
    in.id = ids[0];
    in.kind = LayerKind::input;
    const int ext = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_extent - 1)));
    in.input_shape = in.output_shape = Shape{pick_channels(), ext, ext};
    in.out_channels = in.output_shape.c;
    layers.push_back(in);

    // creation order is a valid topological order: each node reads earlier nodes
    for (int k = 1; k < n - 1; ++k) {
        const LayerSpec& src = layers[rng.below(layers.size())];
        LayerSpec l;
        l.id = ids[static_cast<std::size_t>(k)];
        l.input_ids = {src.id};
        l.input_shape = src.output_shape;
        const Shape s = src.output_shape;

        std::vector<LayerKind> kinds{LayerKind::conv2d, LayerKind::depthwise_conv2d, LayerKind::pointwise_conv2d};
        if (opt.allow_fc) kinds.push_back(LayerKind::fully_connected);
        const bool last = k == n - 2;
        if (!(last && opt.weighted_logits)) {
            kinds.push_back(LayerKind::avg_pool);
            kinds.push_back(LayerKind::relu_clip);
            for (const LayerSpec& other : layers) {
                if (other.output_shape == s) {
                    kinds.push_back(LayerKind::add_residual);
                    break;
                }
            }
        }
        l.kind = kinds[rng.below(kinds.size())];
        const bool bias = rng.below(2) == 1;
        switch (l.kind) {
            case LayerKind::conv2d:
            case LayerKind::depthwise_conv2d: {
                l.kernel_h = l.kernel_w = rng.below(2) ? 3 : 1;
                l.stride = rng.below(2) ? 2 : 1;
                l.padding = l.kernel_h == 3 && rng.below(3) ? 1 : 0;
                if (out_extent(s.h, l.kernel_h, l.stride, l.padding) < 1 ||
                    out_extent(s.w, l.kernel_w, l.stride, l.padding) < 1) {
                    l.kernel_h = l.kernel_w = 1;
                    l.padding = 0;
                }
                l.out_channels = l.kind == LayerKind::conv2d ? pick_channels() : s.c;
                l.output_shape = Shape{l.out_channels, out_extent(s.h, l.kernel_h, l.stride, l.padding),
                                       out_extent(s.w, l.kernel_w, l.stride, l.padding)};
                l.param_count = l.kind == LayerKind::conv2d
                                    ? std::int64_t{s.c} * l.out_channels * l.kernel_h * l.kernel_w
                                    : std::int64_t{s.c} * l.kernel_h * l.kernel_w;
                l.bias_count = bias ? l.out_channels : 0;
                break;
            }
            case LayerKind::pointwise_conv2d:
                l.out_channels = pick_channels();
                l.output_shape = Shape{l.out_channels, s.h, s.w};
                l.param_count = std::int64_t{s.c} * l.out_channels;
                l.bias_count = bias ? l.out_channels : 0;
                break;
            case LayerKind::fully_connected:
                l.out_channels = pick_channels();
                l.output_shape = Shape{l.out_channels, 1, 1};
                l.param_count = s.numel() * l.out_channels;
                l.bias_count = bias ? l.out_channels : 0;
                break;
            case LayerKind::avg_pool: {
                const int kk = std::min(s.h, s.w) >= 2 && rng.below(2) ? 2 : 1;
                l.kernel_h = l.kernel_w = kk;
                l.stride = kk;
                l.out_channels = s.c;
                l.output_shape = Shape{s.c, out_extent(s.h, kk, kk, 0), out_extent(s.w, kk, kk, 0)};
                break;
            }
            case LayerKind::relu_clip:
                l.out_channels = s.c;
                l.output_shape = s;
                break;
            case LayerKind::add_residual: {
                std::vector<LayerId> same;
                for (const LayerSpec& other : layers) {
                    if (other.output_shape == s && other.id != src.id) same.push_back(other.id);
                }
                const LayerId second = same.empty() ? src.id : same[rng.below(same.size())];
                l.input_ids = {src.id, second};
                l.out_channels = s.c;
                l.output_shape = s;
                break;
            }
            default:
                break;
        }
        layers.push_back(l);
    }

    LayerSpec out;
    out.id = ids.back();
    out.kind = LayerKind::output;
    const LayerSpec& feed = opt.weighted_logits || rng.below(2) ? layers.back() : layers[rng.below(layers.size())];
    out.input_ids = {feed.id};
    out.input_shape = out.output_shape = feed.output_shape;
    layers.push_back(out);

    rng.shuffle(layers);
    return NetworkGraph(std::move(layers));
}

/// Random policy over {2,4,8} (and 32 when `allow_fp`), occasionally covering the logits.
inline QuantPolicy random_policy(Rng& rng, const NetworkGraph& g, bool allow_fp = false) {
    const std::vector<int> choices = allow_fp ? std::vector<int>{2, 4, 8, 32} : std::vector<int>{2, 4, 8};
    auto pick = [&] { return choices[rng.below(choices.size())]; };
    QuantPolicy p;
    for (LayerId id : g.weighted_layers()) p.weight_bits[id] = pick();
    for (LayerId id : g.quantizable_activations()) p.act_bits[id] = pick();
    if (rng.below(3) == 0 && g.logits_tensor() != g.input_id()) p.act_bits[g.logits_tensor()] = pick();
    return p;
}

/// Every topological order of `g` (small graphs only).
inline std::vector<std::vector<LayerId>> all_topo_orders(const NetworkGraph& g) {
    std::vector<std::vector<LayerId>> out;
    std::vector<LayerId> cur;
    std::map<LayerId, int> indeg;
    for (const LayerSpec& l : g.layers()) indeg[l.id] = static_cast<int>(l.input_ids.size());
    std::function<void()> rec = [&] {
        if (cur.size() == g.layers().size()) {
            out.push_back(cur);
            return;
        }
        for (auto& [id, d] : indeg) {
            if (d != 0) continue;
            d = -1;
            cur.push_back(id);
            for (LayerId c : g.consumers(id)) --indeg[c];
            rec();
            for (LayerId c : g.consumers(id)) ++indeg[c];
            cur.pop_back();
            d = 0;
        }
    };
    rec();
    return out;
}

// ---------------------------------------------------------------- liveness

/// Materializing simulator: allocate each produced tensor when its layer runs,
/// record what is resident, then free every tensor with no pending consumer.
inline std::vector<std::vector<LayerId>> simulate_liveness(const NetworkGraph& g, const std::vector<LayerId>& order) {
    std::map<LayerId, int> pending;  // outstanding reads per tensor
    for (const LayerSpec& l : g.layers()) {
        for (LayerId src : l.input_ids) ++pending[src];
    }
    std::set<LayerId> resident;
    std::vector<std::vector<LayerId>> steps;
    for (LayerId id : order) {
        const LayerSpec& l = g.layer(id);
        if (l.kind != LayerKind::output) resident.insert(id);
        steps.emplace_back(resident.begin(), resident.end());
        for (LayerId src : l.input_ids) --pending[src];
        for (auto it = resident.begin(); it != resident.end();) {
            it = pending[*it] == 0 ? resident.erase(it) : std::next(it);
        }
    }
    return steps;
}

// ---------------------------------------------------------------- footprints

inline std::int64_t bits_to_bytes(std::int64_t count, int bits) {
    const std::int64_t total_bits = count * bits;
    return total_bits / 8 + (total_bits % 8 != 0 ? 1 : 0);
}

inline std::int64_t brute_rom(const NetworkGraph& g, const QuantPolicy& p, bool overheads = true) {
    std::int64_t total = 0;
    for (const LayerSpec& l : g.layers()) {
        const bool weighted = l.kind == LayerKind::conv2d || l.kind == LayerKind::depthwise_conv2d ||
                              l.kind == LayerKind::pointwise_conv2d || l.kind == LayerKind::fully_connected;
        if (!weighted) continue;
        const int bits = p.weight_bits.at(l.id);
        total += bits_to_bytes(l.param_count, bits);
        if (overheads) {
            total += l.bias_count * 4;
            if (bits != 32) total += std::int64_t{l.out_channels} * 8;
        }
    }
    return total;
}

inline int tensor_bits(const NetworkGraph& g, const QuantPolicy& p, LayerId t) {
    const auto it = p.act_bits.find(t);
    if (it != p.act_bits.end()) return it->second;
    if (t == g.logits_tensor()) return 32;
    throw mpq::PolicyError("oracle: no bits for tensor");
}

/// Per-step resident bytes from the materializing simulator.
inline std::vector<std::int64_t> brute_ram(const NetworkGraph& g, const QuantPolicy& p) {
    std::vector<std::int64_t> out;
    for (const auto& live : simulate_liveness(g, g.order())) {
        std::int64_t s = 0;
        for (LayerId t : live) s += bits_to_bytes(g.layer(t).output_shape.numel(), tensor_bits(g, p, t));
        out.push_back(s);
    }
    return out;
}

inline int next_lower(int bits) { return bits == 32 ? 8 : bits == 8 ? 4 : 2; }

/// Plain greedy: while over budget, demote the non-frozen weight tensor with the
/// most packed bytes (ties: the wider tensor, then the lowest id).
inline QuantPolicy reference_enforce_rom(const NetworkGraph& g, QuantPolicy p, std::int64_t budget, bool overheads) {
    while (brute_rom(g, p, overheads) > budget) {
        LayerId best = -1;
        std::int64_t best_bytes = -1;
        int best_bits = 0;
        for (const auto& [id, bits] : p.weight_bits) {
            if (bits == 2 || p.frozen_weights.count(id)) continue;
            const std::int64_t b = bits_to_bytes(g.layer(id).param_count, bits);
            if (b > best_bytes || (b == best_bytes && bits > best_bits)) best = id, best_bytes = b, best_bits = bits;
        }
        if (best < 0) throw mpq::InfeasibleError("oracle: infeasible");
        p.weight_bits[best] = next_lower(p.weight_bits[best]);
    }
    return p;
}

/// Same greedy over the activations resident at the first peak step.
inline QuantPolicy reference_enforce_ram(const NetworkGraph& g, QuantPolicy p, std::int64_t budget) {
    const auto live = simulate_liveness(g, g.order());
    for (;;) {
        const auto ram = brute_ram(g, p);
        const auto peak = std::max_element(ram.begin(), ram.end());
        if (*peak <= budget) return p;
        LayerId best = -1;
        std::int64_t best_bytes = -1;
        int best_bits = 0;
        for (LayerId t : live[static_cast<std::size_t>(peak - ram.begin())]) {
            const auto it = p.act_bits.find(t);
            if (it == p.act_bits.end() || it->second == 2 || p.frozen_acts.count(t)) continue;
            const std::int64_t b = bits_to_bytes(g.layer(t).output_shape.numel(), it->second);
            if (b > best_bytes || (b == best_bytes && it->second > best_bits)) {
                best = t, best_bytes = b, best_bits = it->second;
            }
        }
        if (best < 0) throw mpq::InfeasibleError("oracle: infeasible");
        p.act_bits[best] = next_lower(p.act_bits[best]);
    }
}

// ---------------------------------------------------------------- exact arithmetic

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

inline Rational exact(double v) { return Rational(v); }

/// Round half away from zero, exactly.
inline BigInt round_exact(const Rational& v) {
    const BigInt n = boost::multiprecision::numerator(v);
    const BigInt d = boost::multiprecision::denominator(v);
    const BigInt mag = (2 * abs(n) + d) / (2 * d);
    return n < 0 ? BigInt(-mag) : mag;
}

/// Code of an exact value on grid `step`, saturated to [lo, top].
inline std::int32_t encode_exact(const Rational& v, const Rational& step, std::int32_t top, std::int32_t lo = 0) {
    const BigInt r = round_exact(v / step);
    if (r < lo) return lo;
    if (r > top) return top;
    return r.convert_to<std::int32_t>();
}

}  // namespace oracle
