#include "mpq/memory_model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mpq {

namespace {

using json = nlohmann::json;

void check_bits(int bits, const std::string& where) {
    if (!is_policy_bits(bits)) {
        throw PolicyError(where + ": unsupported bitwidth " + std::to_string(bits));
    }
}

std::map<LayerId, int> parse_bits_map(const json& j) {
    std::map<LayerId, int> out;
    for (const auto& [key, value] : j.items()) {
        std::size_t used = 0;
        LayerId id = 0;
        try {
            id = std::stoi(key, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != key.size()) throw ParseError("policy: non-integer tensor id '" + key + "'");
        out[id] = value.get<int>();
    }
    return out;
}

json bits_map_json(const std::map<LayerId, int>& m) {
    json j = json::object();
    for (const auto& [id, bits] : m) j[std::to_string(id)] = bits;
    return j;
}

}  // namespace

QuantPolicy QuantPolicy::uniform(const NetworkGraph& g, int weight, int act) {
    QuantPolicy p;
    for (LayerId id : g.weighted_layers()) p.weight_bits[id] = weight;
    for (LayerId id : g.quantizable_activations()) p.act_bits[id] = act;
    return p;
}

void validate_policy(const NetworkGraph& g, const QuantPolicy& p) {
    for (LayerId id : g.weighted_layers()) {
        const auto it = p.weight_bits.find(id);
        if (it == p.weight_bits.end()) throw PolicyError("no weight bits for layer " + std::to_string(id));
    }
    for (const auto& [id, bits] : p.weight_bits) {
        if (!g.contains(id) || !g.layer(id).has_weights()) {
            throw PolicyError("weight bits given for layer " + std::to_string(id) + " which has no weights");
        }
        check_bits(bits, "weight " + std::to_string(id));
    }
    for (LayerId id : g.quantizable_activations()) {
        if (!p.act_bits.count(id)) throw PolicyError("no activation bits for tensor " + std::to_string(id));
    }
    for (const auto& [id, bits] : p.act_bits) {
        if (!g.contains(id) || g.layer(id).kind == LayerKind::output) {
            throw PolicyError("activation bits given for unknown tensor " + std::to_string(id));
        }
        check_bits(bits, "activation " + std::to_string(id));
    }
}

void MemoryBudget::validate() const {
    if (rom_bytes <= 0 || ram_bytes <= 0) throw Error("memory budget limits must be strictly positive");
}

std::int64_t layer_rom_bytes(const LayerSpec& layer, int bits, const FootprintOptions& opt) {
    std::int64_t bytes = static_cast<std::int64_t>(packed_bytes(static_cast<std::size_t>(layer.param_count), bits));
    if (opt.include_overheads) {
        bytes += layer.bias_count * kBiasBytes;
        if (bits != 32) bytes += std::int64_t{layer.out_channels} * kRequantBytesPerChannel;
    }
    return bytes;
}

int act_bits_for(const NetworkGraph& g, const QuantPolicy& p, LayerId tensor) {
    const auto it = p.act_bits.find(tensor);
    if (it != p.act_bits.end()) return it->second;
    if (tensor == g.logits_tensor()) return 32;
    throw PolicyError("no activation bits for live tensor " + std::to_string(tensor));
}

std::int64_t tensor_ram_bytes(const NetworkGraph& g, LayerId tensor, int bits) {
    return static_cast<std::int64_t>(
        packed_bytes(static_cast<std::size_t>(g.layer(tensor).output_shape.numel()), bits));
}

FootprintReport rom_footprint(const NetworkGraph& g, const QuantPolicy& p, const FootprintOptions& opt) {
    FootprintReport r;
    for (LayerId id : g.weighted_layers()) {
        const auto it = p.weight_bits.find(id);
        if (it == p.weight_bits.end()) throw PolicyError("no weight bits for layer " + std::to_string(id));
        check_bits(it->second, "weight " + std::to_string(id));
        const std::int64_t bytes = layer_rom_bytes(g.layer(id), it->second, opt);
        r.rom_per_layer[id] = bytes;
        r.rom_total += bytes;
    }
    return r;
}

FootprintReport ram_footprint(const NetworkGraph& g, const QuantPolicy& p) {
    FootprintReport r;
    for (const LiveStep& step : liveness(g)) {
        std::int64_t bytes = 0;
        for (LayerId t : step.live) bytes += tensor_ram_bytes(g, t, act_bits_for(g, p, t));
        r.steps.push_back(step.layer);
        r.per_step_ram.push_back(bytes);
        if (bytes > r.ram_peak || r.ram_peak_step < 0) {
            r.ram_peak = bytes;
            r.ram_peak_step = step.layer;
        }
    }
    return r;
}

FootprintReport footprint(const NetworkGraph& g, const QuantPolicy& p, const FootprintOptions& opt) {
    FootprintReport r = ram_footprint(g, p);
    FootprintReport rom = rom_footprint(g, p, opt);
    r.rom_total = rom.rom_total;
    r.rom_per_layer = std::move(rom.rom_per_layer);
    return r;
}

ConstraintCheck check_constraints(const NetworkGraph& g, const QuantPolicy& p, const MemoryBudget& b,
                                  const FootprintOptions& opt) {
    ConstraintCheck c;
    c.report = footprint(g, p, opt);
    c.m1_ok = c.report.rom_total <= b.rom_bytes;
    c.m2_ok = c.report.ram_peak <= b.ram_bytes;
    return c;
}

int demote(int bits) {
    switch (bits) {
        case 32: return 8;
        case 8: return 4;
        case 4: return 2;
        default: return bits;
    }
}

QuantPolicy enforce_rom(const NetworkGraph& g, QuantPolicy p, const MemoryBudget& b, const FootprintOptions& opt) {
    validate_policy(g, p);
    for (;;) {
        const FootprintReport r = rom_footprint(g, p, opt);
        if (r.rom_total <= b.rom_bytes) return p;
        LayerId pick = -1;
        std::int64_t pick_bytes = -1;
        int pick_bits = 0;
        // equal bytes: the wider tensor goes first, then the lowest id (ids are visited ascending)
        for (const auto& [id, layer_bytes] : r.rom_per_layer) {
            const int bits = p.weight_bits.at(id);
            if (p.frozen_weights.count(id) || demote(bits) == bits) continue;
            // rank by the weight tensor itself; biases and requant words do not shrink
            const auto bytes = static_cast<std::int64_t>(packed_bytes(static_cast<std::size_t>(g.layer(id).param_count), bits));
            if (bytes > pick_bytes || (bytes == pick_bytes && bits > pick_bits)) {
                pick = id;
                pick_bytes = bytes;
                pick_bits = bits;
            }
        }
        if (pick < 0) {
            throw InfeasibleError("ROM budget " + std::to_string(b.rom_bytes) + " B unreachable: " +
                                  std::to_string(r.rom_total) + " B with every eligible weight tensor at 2 bits");
        }
        p.weight_bits[pick] = demote(p.weight_bits[pick]);
    }
}

QuantPolicy enforce_ram(const NetworkGraph& g, QuantPolicy p, const MemoryBudget& b) {
    validate_policy(g, p);
    const auto steps = liveness(g);
    for (;;) {
        const FootprintReport r = ram_footprint(g, p);
        if (r.ram_peak <= b.ram_bytes) return p;
        const auto step = std::find_if(steps.begin(), steps.end(),
                                       [&](const LiveStep& s) { return s.layer == r.ram_peak_step; });
        LayerId pick = -1;
        std::int64_t pick_bytes = -1;
        int pick_bits = 0;
        for (LayerId t : step->live) {  // sorted ascending
            const auto it = p.act_bits.find(t);
            if (it == p.act_bits.end() || p.frozen_acts.count(t) || demote(it->second) == it->second) continue;
            const std::int64_t bytes = tensor_ram_bytes(g, t, it->second);
            if (bytes > pick_bytes || (bytes == pick_bytes && it->second > pick_bits)) {
                pick = t;
                pick_bytes = bytes;
                pick_bits = it->second;
            }
        }
        if (pick < 0) {
            throw InfeasibleError("RAM budget " + std::to_string(b.ram_bytes) + " B unreachable: peak " +
                                  std::to_string(r.ram_peak) + " B at layer " + std::to_string(r.ram_peak_step) +
                                  " with no demotable tensor left");
        }
        p.act_bits[pick] = demote(p.act_bits[pick]);
    }
}

std::string policy_to_json(const QuantPolicy& p) {
    json j{
        {"weight_bits", bits_map_json(p.weight_bits)},
        {"act_bits", bits_map_json(p.act_bits)},
        {"frozen", std::vector<LayerId>(p.frozen_acts.begin(), p.frozen_acts.end())},
    };
    if (!p.frozen_weights.empty()) {
        j["frozen_weights"] = std::vector<LayerId>(p.frozen_weights.begin(), p.frozen_weights.end());
    }
    return j.dump(1) + "\n";
}

QuantPolicy policy_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        QuantPolicy p;
        p.weight_bits = parse_bits_map(j.at("weight_bits"));
        p.act_bits = parse_bits_map(j.value("act_bits", json::object()));
        for (LayerId id : j.value("frozen", std::vector<LayerId>{})) p.frozen_acts.insert(id);
        for (LayerId id : j.value("frozen_weights", std::vector<LayerId>{})) p.frozen_weights.insert(id);
        return p;
    } catch (const json::exception& e) {
        throw ParseError(std::string("policy JSON: ") + e.what());
    }
}

QuantPolicy load_policy(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open policy file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return policy_from_json(ss.str());
}

void save_policy(const QuantPolicy& p, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write policy file " + path.string());
    out << policy_to_json(p);
}

std::string ram_csv(const FootprintReport& r) {
    std::ostringstream os;
    os << "step,ram_bytes\n";
    for (std::size_t i = 0; i < r.steps.size(); ++i) os << r.steps[i] << ',' << r.per_step_ram[i] << '\n';
    return os.str();
}

std::string rom_csv(const FootprintReport& r) {
    std::ostringstream os;
    os << "layer,rom_bytes\n";
    for (const auto& [id, bytes] : r.rom_per_layer) os << id << ',' << bytes << '\n';
    return os.str();
}

}  // namespace mpq
