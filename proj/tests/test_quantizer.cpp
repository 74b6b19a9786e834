#include <doctest.h>

#include <cmath>
#include <limits>

#include "mpq/quantizer.hpp"
#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace mpq;

TEST_CASE("per-channel weight quantization") {
    SUBCASE("all-zero channel keeps scale 1") {
        const std::vector<double> w{0, 0, 0};
        const QuantizedTensor q = quantize_weights_pc(w, {1, 3}, 4);
        CHECK(q.scales == std::vector<float>{1.0f});
        CHECK(q.codes() == std::vector<std::int32_t>{0, 0, 0});
    }
    SUBCASE("2-bit uses the full two's complement range") {
        const std::vector<double> w{-1.0, 0.5, 1.0};
        const QuantizedTensor q = quantize_weights_pc(w, {1, 3}, 2);
        CHECK(q.scales[0] == 1.0f);
        CHECK(q.codes() == std::vector<std::int32_t>{-1, 1, 1});
        CHECK(q.packed.size() == 1);
    }
    SUBCASE("non-finite input") {
        const std::vector<double> w{1.0, std::numeric_limits<double>::quiet_NaN()};
        CHECK_THROWS_AS(quantize_weights_pc(w, {1, 2}, 8), QuantError);
    }
}

TEST_CASE("weight round trip stays within half a step per channel") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int channels = 1 + static_cast<int>(rng.below(6));
        const int per = 1 + static_cast<int>(rng.below(20));
        std::vector<double> w(static_cast<std::size_t>(channels * per));
        for (double& v : w) v = rng.normal() * rng.uniform(0.01, 3.0);
        for (int bits : {2, 4, 8}) {
            const QuantizedTensor q = quantize_weights_pc(w, {channels, per}, bits);
            CHECK(q.packed.size() == packed_bytes(w.size(), bits));
            const auto d = dequantize(q);
            const auto codes = q.codes();
            for (int c = 0; c < channels; ++c) {
                const double s = q.scales[static_cast<std::size_t>(c)];
                CHECK(s > 0);
                for (int i = 0; i < per; ++i) {
                    const auto k = static_cast<std::size_t>(c * per + i);
                    CHECK(codes[k] >= qmin(bits, true));
                    CHECK(codes[k] <= qmax(bits, true));
                    // the scale is stored as float32, so allow its rounding on top of half a step
                    CHECK(std::abs(d[k] - w[k]) <= s / 2 * (1 + 1e-6) + 1e-12);
                }
            }
            // idempotent: re-quantizing the dequantized tensor lands on the same values
            CHECK(dequantize(quantize_weights_pc(d, {channels, per}, bits)) == d);
        }
    }
}

TEST_CASE("activation fake quantization") {
    const ActRange r{0, 1.0};
    CHECK(fake_quant_value(1.0, 1.0, 2) == 1.0);
    CHECK(fake_quant_value(7.3, 7.3, 8) == 7.3);
    CHECK(fake_quant_value(-0.4, 1.0, 4) == 0.0);
    Rng rng(4);
    std::vector<double> x(500);
    for (double& v : x) v = rng.uniform();
    for (double y : fake_quant_act(x, r, 2)) {
        const double k = y * 3;
        CHECK(std::abs(k - std::round(k)) < 1e-12);
    }
    for (int bits : {2, 4, 8}) {
        std::vector<double> xs(300);
        for (double& v : xs) v = rng.uniform(-0.5, 2.0);
        const ActRange rr{0, rng.uniform(0.2, 1.5)};
        const auto once = fake_quant_act(xs, rr, bits);
        CHECK(fake_quant_act(once, rr, bits) == once);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            CHECK(once[i] == doctest::Approx(act_code(xs[i], rr.clip_max, bits) * act_scale(rr.clip_max, bits)));
        }
    }
    CHECK_THROWS_AS(fake_quant_act(x, ActRange{0, 0.0}, 4), QuantError);
    CHECK_THROWS_AS(fake_quant_act(x, ActRange{0, -1.0}, 4), QuantError);
}

TEST_CASE("straight-through and clip gradients match finite differences") {
    // smoothed objective L = sum(g_i * y_i): y is piecewise constant in x, so the
    // check runs on the clipped identity the estimator differentiates
    Rng rng(6);
    const double clip = 0.8;
    std::vector<double> x(200), dy(200);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.uniform(-0.3, 1.2);
        dy[i] = rng.normal();
    }
    const auto grad = fake_quant_act_backward(x, dy, ActRange{0, clip});
    auto smooth = [&](const std::vector<double>& xs, double c) {
        double s = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) s += dy[i] * std::clamp(xs[i], 0.0, c);
        return s;
    };
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::abs(x[i]) < 1e-3 || std::abs(x[i] - clip) < 1e-3) continue;
        auto xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (smooth(xp, clip) - smooth(xm, clip)) / (2 * h);
        CHECK(grad.dx[i] == doctest::Approx(fd).epsilon(1e-4));
    }
    const double fd_clip = (smooth(x, clip + h) - smooth(x, clip - h)) / (2 * h);
    CHECK(grad.dclip == doctest::Approx(fd_clip).epsilon(1e-4));
}

TEST_CASE("sub-byte packing layout") {
    const std::vector<std::int32_t> u{1, 2, 3, 0};
    CHECK(pack_subbyte(u, 2, false) == std::vector<std::uint8_t>{0x39});
    const std::vector<std::int32_t> s{-2, 1};
    CHECK(pack_subbyte(s, 2, true) == std::vector<std::uint8_t>{0x06});
    const std::vector<std::int32_t> bad{4};
    CHECK_THROWS_AS(pack_subbyte(bad, 2, false), QuantError);
    const std::vector<std::int32_t> bad_signed{-3};
    CHECK_THROWS_AS(pack_subbyte(bad_signed, 2, true), QuantError);
}

TEST_CASE("pack/unpack round trip: exhaustive at 2 and 4 bits, random at 8") {
    for (int bits : {2, 4}) {
        for (bool is_signed : {false, true}) {
            std::vector<std::int32_t> all;
            for (int v = qmin(bits, is_signed); v <= qmax(bits, is_signed); ++v) all.push_back(v);
            // every ordered pair and every odd length exercises field straddling and tails
            std::vector<std::int32_t> pairs;
            for (int a : all) {
                for (int b : all) {
                    pairs.push_back(a);
                    pairs.push_back(b);
                }
            }
            for (std::size_t n = 0; n <= pairs.size(); n += 1 + n / 4) {
                const std::span<const std::int32_t> v(pairs.data(), n);
                const auto bytes = pack_subbyte(v, bits, is_signed);
                CHECK(bytes.size() == packed_bytes(n, bits));
                CHECK(unpack_subbyte(bytes, bits, n, is_signed) == std::vector<std::int32_t>(v.begin(), v.end()));
            }
        }
    }
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        for (bool is_signed : {false, true}) {
            std::vector<std::int32_t> v(rng.below(64));
            for (auto& x : v) x = qmin(8, is_signed) + static_cast<std::int32_t>(rng.below(256));
            CHECK(unpack_subbyte(pack_subbyte(v, 8, is_signed), 8, v.size(), is_signed) == v);
        }
    }
}

TEST_CASE("requantization multiplier decomposition") {
    const RequantParams half = requant_from_multiplier(0.5);
    CHECK(half.multiplier == (1 << 30));
    CHECK(half.shift == 31);

    const RequantParams r = requant_from_multiplier(0.251);
    CHECK(requantize(100, r, -128, 127) == 25);

    Rng rng(9);
    for (int trial = 0; trial < 2000; ++trial) {
        const double m = std::exp(rng.uniform(-20.0, -0.01));
        const RequantParams p = requant_from_multiplier(m);
        CHECK(p.multiplier >= (1 << 30));
        CHECK(std::int64_t{p.multiplier} < (std::int64_t{1} << 31));
        CHECK(p.shift >= 0);
        const double approx = std::ldexp(static_cast<double>(p.multiplier), -p.shift);
        CHECK(std::abs(approx - m) / m <= std::ldexp(1.0, -30));

        // integer path vs exact rational rounding
        const auto acc = static_cast<std::int64_t>(rng.below(1u << 24)) - (1 << 23);
        const oracle::Rational exact =
            oracle::Rational(acc) * p.multiplier / oracle::Rational(oracle::BigInt(1) << p.shift);
        CHECK(apply_multiplier(acc, p) == oracle::round_exact(exact).convert_to<std::int64_t>());
    }
    CHECK_THROWS_AS(requant_from_multiplier(0.0), QuantError);
    CHECK_THROWS_AS(requant_from_multiplier(std::nan("")), QuantError);
}

TEST_CASE("half-way accumulators round away from zero") {
    const RequantParams p = requant_from_multiplier(0.5);
    CHECK(apply_multiplier(5, p) == 3);
    CHECK(apply_multiplier(-5, p) == -3);
    CHECK(apply_multiplier(4, p) == 2);
    CHECK(requantize(1000, p, 0, 15) == 15);
    CHECK(requantize(-1000, p, 0, 15) == 0);
}

TEST_CASE("per-channel requant follows s_in * s_w / s_out") {
    const std::vector<float> sw{0.01f, 0.02f, 0.5f};
    const auto rq = compute_requant(0.1, sw, 0.05);
    REQUIRE(rq.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        const double m = 0.1 * static_cast<double>(sw[c]) / 0.05;
        CHECK(std::ldexp(static_cast<double>(rq[c].multiplier), -rq[c].shift) == doctest::Approx(m).epsilon(1e-9));
    }
}

TEST_CASE("percentile clip") {
    CHECK(percentile_clip(std::vector<double>(100, 0.0)) == kMinClip);
    CHECK(percentile_clip(std::vector<double>(50, 2.5)) == 2.5);
    // sort-based reference with linear interpolation between order statistics
    Rng rng(10);
    std::vector<double> v(1234);
    for (double& x : v) x = rng.uniform(0, 5);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    const double pos = 0.999 * 1233;
    const auto lo = static_cast<std::size_t>(pos);
    const double want = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
    CHECK(percentile_clip(v) == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_AS(percentile_clip({}), QuantError);
}

TEST_CASE("integer model serialization") {
    const NetworkGraph g = load_graph(testing_support::fixture("residual_toy.json"));
    FloatModel m = init_float_model(g, 5);
    for (LayerId t : g.quantizable_activations()) m.ranges[t] = ActRange{t, 0.5 + 0.01 * t};
    Rng rng(2);
    QuantPolicy p = QuantPolicy::uniform(g, 8, 8);
    const int choices[] = {2, 4, 8};
    for (auto& [id, bits] : p.weight_bits) bits = choices[rng.below(3)];
    const IntModel im = build_int_model(g, m, p);
    const auto bytes = serialize_model(im);
    CHECK(bytes.size() > 8);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MPQ1");
    CHECK(deserialize_model(bytes) == im);
    for (const IntLayer& l : im.layers) {
        if (l.has_weights()) CHECK(l.weights.bits == p.weight_bits.at(l.id));
    }

    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK_THROWS_AS(deserialize_model(truncated), ParseError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_model(bad_magic), ParseError);
}
