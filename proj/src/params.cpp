#include "mpq/params.hpp"

#include <fstream>
#include <iterator>

#include "binary_io.hpp"

namespace mpq {

namespace detail {

std::vector<std::uint8_t> read_file(const std::string& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + what + " " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

std::array<int, 4> weight_dims(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::pointwise_conv2d:
            return {l.out_channels, l.input_shape.c, l.kernel_h, l.kernel_w};
        case LayerKind::depthwise_conv2d:
            return {l.input_shape.c, 1, l.kernel_h, l.kernel_w};
        case LayerKind::fully_connected:
            return {l.out_channels, static_cast<int>(l.input_shape.numel()), 1, 1};
        default:
            return {0, 0, 0, 0};
    }
}

FloatModel init_float_model(const NetworkGraph& g, std::uint64_t seed) {
    Rng rng(seed);
    FloatModel m;
    for (LayerId id : g.weighted_layers()) {
        const LayerSpec& l = g.layer(id);
        const auto d = weight_dims(l);
        const double fan_in = static_cast<double>(d[1]) * d[2] * d[3];
        const double std_dev = std::sqrt(2.0 / fan_in);
        LayerParams p;
        p.weight.resize(static_cast<std::size_t>(l.param_count));
        for (double& w : p.weight) w = rng.normal() * std_dev;
        p.bias.assign(static_cast<std::size_t>(l.bias_count), 0.0);
        m.layers.emplace(id, std::move(p));
    }
    return m;
}

void validate_float_model(const NetworkGraph& g, const FloatModel& m) {
    for (LayerId id : g.weighted_layers()) {
        const LayerSpec& l = g.layer(id);
        const auto it = m.layers.find(id);
        if (it == m.layers.end()) throw Error("model has no parameters for layer " + std::to_string(id));
        if (static_cast<std::int64_t>(it->second.weight.size()) != l.param_count ||
            static_cast<std::int64_t>(it->second.bias.size()) != l.bias_count) {
            throw Error("parameter size mismatch for layer " + std::to_string(id));
        }
    }
}

void save_checkpoint(const FloatModel& m, const std::filesystem::path& path) {
    detail::ByteWriter w;
    w.tag("MPQW");
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.layers.size()));
    for (const auto& [id, p] : m.layers) {
        w.put<std::int32_t>(id);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.weight.size()));
        for (double v : p.weight) w.put(v);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.bias.size()));
        for (double v : p.bias) w.put(v);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.ranges.size()));
    for (const auto& [id, r] : m.ranges) {
        w.put<std::int32_t>(id);
        w.put(r.clip_max);
    }
    detail::write_file(path.string(), w.bytes());
}

FloatModel load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path.string(), "checkpoint");
    detail::ByteReader r(bytes, "checkpoint " + path.string());
    r.expect_tag("MPQW");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    FloatModel m;
    const std::size_t n_layers = r.count(12);
    for (std::size_t i = 0; i < n_layers; ++i) {
        const auto id = r.get<std::int32_t>();
        LayerParams p;
        p.weight.resize(r.count(8));
        for (double& v : p.weight) v = r.get<double>();
        p.bias.resize(r.count(8));
        for (double& v : p.bias) v = r.get<double>();
        m.layers.emplace(id, std::move(p));
    }
    const std::size_t n_ranges = r.count(12);
    for (std::size_t i = 0; i < n_ranges; ++i) {
        const auto id = r.get<std::int32_t>();
        m.ranges[id] = ActRange{id, r.get<double>()};
    }
    if (!r.done()) throw ParseError("checkpoint: trailing bytes");
    return m;
}

}  // namespace mpq
