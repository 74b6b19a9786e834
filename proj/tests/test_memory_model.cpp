#include <doctest.h>

#include "mpq/memory_model.hpp"
#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace mpq;
using testing_support::fixture;

namespace {

const char* kChain = R"({"layers": [
  {"id": 0, "kind": "input", "input_ids": [], "out_channels": 1, "input_shape": [1,8,8], "output_shape": [1,8,8]},
  {"id": 1, "kind": "conv2d", "input_ids": [0], "out_channels": 4, "kernel_h": 3, "kernel_w": 3, "padding": 1,
   "input_shape": [1,8,8], "output_shape": [4,8,8], "param_count": 36},
  {"id": 2, "kind": "output", "input_ids": [1], "input_shape": [4,8,8], "output_shape": [4,8,8]}]})";

/// Three fully connected layers with the given weight counts (in = 1 x 1 x n_in).
NetworkGraph fc_stack(std::int64_t a, std::int64_t b, std::int64_t c) {
    auto fc = [](LayerId id, LayerId src, int in, int out) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::fully_connected;
        l.input_ids = {src};
        l.input_shape = {in, 1, 1};
        l.output_shape = {out, 1, 1};
        l.out_channels = out;
        l.param_count = std::int64_t{in} * out;
        return l;
    };
    LayerSpec in;
    in.kind = LayerKind::input;
    in.input_shape = in.output_shape = {1000, 1, 1};
    in.out_channels = 1000;
    LayerSpec out;
    out.id = 4;
    out.kind = LayerKind::output;
    out.input_ids = {3};
    const int o1 = static_cast<int>(a / 1000), o2 = static_cast<int>(b / o1), o3 = static_cast<int>(c / o2);
    out.input_shape = out.output_shape = {o3, 1, 1};
    return NetworkGraph({in, fc(1, 0, 1000, o1), fc(2, 1, o1, o2), fc(3, 2, o2, o3), out});
}

}  // namespace

TEST_CASE("ROM of a single conv follows the stated formula") {
    const NetworkGraph g = parse_graph(kChain);
    QuantPolicy p = QuantPolicy::uniform(g, 2, 8);
    // ceil(36*2/8) = 9 weight bytes + 4 channels * 8 requant bytes
    CHECK(rom_footprint(g, p).rom_total == 41);
    CHECK(rom_footprint(g, p, {false}).rom_total == 9);
    p.weight_bits[1] = 32;
    CHECK(rom_footprint(g, p).rom_total == 36 * 4);
}

TEST_CASE("RAM of the two-tensor chain") {
    const NetworkGraph g = parse_graph(kChain);
    QuantPolicy p = QuantPolicy::uniform(g, 8, 8);
    // the conv output is the logits tensor: it must be listed to be stored at 8 bits
    p.act_bits[1] = 8;
    CHECK(ram_footprint(g, p).ram_peak == 64 + 256);
    p.act_bits[1] = 2;
    CHECK(ram_footprint(g, p).ram_peak == 64 + 64);
    p.act_bits.erase(1);
    CHECK(ram_footprint(g, p).ram_peak == 64 + 256 * 4);
}

TEST_CASE("MobileNetV1 footprints") {
    const NetworkGraph g = load_graph(fixture("mobilenet_v1_224_100.json"));
    const auto all8 = QuantPolicy::uniform(g, 8, 8);
    const auto fp32 = QuantPolicy::uniform(g, 32, 32);
    // weights + int32 biases + 8 B per output channel (10,944 conv channels + 1000 classes)
    CHECK(rom_footprint(g, all8).rom_total == 4209088 + 11944 * 4 + 11944 * 8);
    CHECK(rom_footprint(g, fp32).rom_total == (4209088 + 11944) * 4);
    CHECK(oracle::brute_rom(g, all8) == rom_footprint(g, all8).rom_total);

    MemoryBudget b;
    b.rom_bytes = 2000000;
    b.ram_bytes = 512000;
    const ConstraintCheck c = check_constraints(g, all8, b);
    CHECK_FALSE(c.m1_ok);
    CHECK(c.report.rom_total > 2000000);
}

TEST_CASE("constraint boundaries are inclusive") {
    const NetworkGraph g = load_graph(fixture("toycnn_mnist.json"));
    const auto p = QuantPolicy::uniform(g, 4, 4);
    const FootprintReport r = footprint(g, p);
    MemoryBudget b{r.rom_total, r.ram_peak};
    auto c = check_constraints(g, p, b);
    CHECK(c.m1_ok);
    CHECK(c.m2_ok);
    b = {r.rom_total - 1, r.ram_peak - 1};
    c = check_constraints(g, p, b);
    CHECK_FALSE(c.m1_ok);
    CHECK_FALSE(c.m2_ok);

    const auto all2 = QuantPolicy::uniform(g, 2, 2);
    c = check_constraints(g, all2, MemoryBudget{1 << 30, 1 << 30});
    CHECK(c.m1_ok);
    CHECK(c.m2_ok);
}

TEST_CASE("report invariants and brute-force agreement on random graphs") {
    Rng rng(21);
    for (int trial = 0; trial < 400; ++trial) {
        const NetworkGraph g = oracle::random_graph(rng, {2 + static_cast<int>(rng.below(7))});
        const QuantPolicy p = oracle::random_policy(rng, g, true);
        for (bool overheads : {true, false}) {
            const FootprintReport r = footprint(g, p, {overheads});
            std::int64_t sum = 0;
            for (const auto& [id, bytes] : r.rom_per_layer) sum += bytes;
            CHECK(r.rom_total == sum);
            CHECK(r.rom_total == oracle::brute_rom(g, p, overheads));
            const auto ram = oracle::brute_ram(g, p);
            CHECK(r.per_step_ram == ram);
            CHECK(r.ram_peak == *std::max_element(ram.begin(), ram.end()));
        }
    }
}

TEST_CASE("residual fixture RAM peak equals the simulator") {
    const NetworkGraph g = load_graph(fixture("residual_toy.json"));
    const auto p = QuantPolicy::uniform(g, 8, 8);
    const auto ram = oracle::brute_ram(g, p);
    CHECK(ram_footprint(g, p).ram_peak == *std::max_element(ram.begin(), ram.end()));
}

TEST_CASE("enforce_rom follows the greedy on the hand-derived case") {
    const NetworkGraph g = fc_stack(1000000, 500000, 100000);
    CHECK(g.layer(1).param_count == 1000000);
    CHECK(g.layer(2).param_count == 500000);
    CHECK(g.layer(3).param_count == 100000);
    const QuantPolicy p = QuantPolicy::uniform(g, 8, 8);
    MemoryBudget b;
    b.rom_bytes = 1000000;
    const QuantPolicy q = enforce_rom(g, p, b, {false});
    CHECK(q.weight_bits.at(1) == 4);
    CHECK(q.weight_bits.at(2) == 4);
    CHECK(q.weight_bits.at(3) == 8);
    CHECK(rom_footprint(g, q, {false}).rom_total == 850000);
}

TEST_CASE("enforce_ram on the hand-derived peak") {
    // input -> relu -> pool: at the relu step A (relu output, 1024 B at 8 bits)
    // and the frozen input B (1024 elements at 4 bits = 512 B) are both resident
    auto relu = [](LayerId id, LayerId src, Shape s) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::relu_clip;
        l.input_ids = {src};
        l.input_shape = l.output_shape = s;
        l.out_channels = s.c;
        return l;
    };
    LayerSpec in;
    in.kind = LayerKind::input;
    in.input_shape = in.output_shape = {1, 32, 32};
    in.out_channels = 1;
    LayerSpec pool;
    pool.id = 2;
    pool.kind = LayerKind::avg_pool;
    pool.input_ids = {1};
    pool.input_shape = {1, 32, 32};
    pool.kernel_h = pool.kernel_w = pool.stride = 2;
    pool.out_channels = 1;
    pool.output_shape = {1, 16, 16};
    LayerSpec out;
    out.id = 3;
    out.kind = LayerKind::output;
    out.input_ids = {2};
    out.input_shape = out.output_shape = {1, 16, 16};
    const NetworkGraph g({in, relu(1, 0, {1, 32, 32}), pool, out});
    QuantPolicy p = QuantPolicy::uniform(g, 8, 8);
    p.act_bits[2] = 8;
    p.frozen_acts.insert(0);
    p.act_bits[0] = 4;
    MemoryBudget b;
    b.ram_bytes = 900;
    const auto before = oracle::brute_ram(g, p);
    CHECK(before[1] == 512 + 1024);
    const QuantPolicy q = enforce_ram(g, p, b);
    CHECK(q.act_bits.at(1) == 2);
    CHECK(q.act_bits.at(0) == 4);
    CHECK(ram_footprint(g, q).ram_peak <= 900);
    CHECK(q == oracle::reference_enforce_ram(g, p, 900));
}

TEST_CASE("fitting policies pass through enforcement unchanged; frozen-only overflow is infeasible") {
    const NetworkGraph g = load_graph(fixture("toycnn_mnist.json"));
    const auto p = QuantPolicy::uniform(g, 8, 8);
    CHECK(enforce_rom(g, p, MemoryBudget{}) == p);
    CHECK(enforce_ram(g, p, MemoryBudget{}) == p);

    QuantPolicy frozen = p;
    for (LayerId id : g.weighted_layers()) frozen.frozen_weights.insert(id);
    for (LayerId id : g.quantizable_activations()) frozen.frozen_acts.insert(id);
    CHECK_THROWS_AS(enforce_rom(g, frozen, MemoryBudget{100, 1 << 30}), InfeasibleError);
    CHECK_THROWS_AS(enforce_ram(g, frozen, MemoryBudget{1 << 30, 100}), InfeasibleError);
    CHECK_THROWS_AS(enforce_rom(g, p, MemoryBudget{100, 1 << 30}), InfeasibleError);
}

TEST_CASE("enforcement matches the reference greedy on random over-budget policies") {
    Rng rng(31);
    int compared = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const NetworkGraph g = oracle::random_graph(rng, {3 + static_cast<int>(rng.below(6))});
        QuantPolicy p = oracle::random_policy(rng, g);
        for (const auto& [id, bits] : p.weight_bits) {
            if (rng.below(4) == 0) p.frozen_weights.insert(id);
        }
        const std::int64_t rom = oracle::brute_rom(g, p);
        const MemoryBudget b{std::max<std::int64_t>(1, static_cast<std::int64_t>(rom * rng.uniform(0.3, 1.0))),
                             std::numeric_limits<std::int64_t>::max()};
        bool ref_ok = true;
        QuantPolicy ref;
        try {
            ref = oracle::reference_enforce_rom(g, p, b.rom_bytes, true);
        } catch (const InfeasibleError&) {
            ref_ok = false;
        }
        if (ref_ok) {
            CHECK(enforce_rom(g, p, b) == ref);
            ++compared;
        } else {
            CHECK_THROWS_AS(enforce_rom(g, p, b), InfeasibleError);
        }
    }
    CHECK(compared > 50);
}

TEST_CASE("policy JSON and CSV round trips") {
    const NetworkGraph g = load_graph(fixture("residual_toy.json"));
    QuantPolicy p = QuantPolicy::uniform(g, 4, 2);
    const auto residual = g.residual_tensors();
    p.frozen_acts.insert(residual.begin(), residual.end());
    p.frozen_weights.insert(g.weighted_layers().front());
    CHECK(policy_from_json(policy_to_json(p)) == p);
    QuantPolicy bad = p;
    bad.weight_bits[g.weighted_layers().front()] = 3;
    CHECK_THROWS_AS(validate_policy(g, policy_from_json(policy_to_json(bad))), PolicyError);
    CHECK_THROWS_AS(policy_from_json("{"), ParseError);

    const FootprintReport r = footprint(g, p);
    std::istringstream ram(ram_csv(r));
    std::string line;
    std::getline(ram, line);
    CHECK(line == "step,ram_bytes");
    std::size_t i = 0;
    while (std::getline(ram, line)) {
        const auto comma = line.find(',');
        CHECK(std::stoi(line.substr(0, comma)) == r.steps[i]);
        CHECK(std::stoll(line.substr(comma + 1)) == r.per_step_ram[i]);
        ++i;
    }
    CHECK(i == r.steps.size());
    std::istringstream rom(rom_csv(r));
    std::getline(rom, line);
    CHECK(line == "layer,rom_bytes");
    std::int64_t total = 0;
    while (std::getline(rom, line)) total += std::stoll(line.substr(line.find(',') + 1));
    CHECK(total == r.rom_total);
}
