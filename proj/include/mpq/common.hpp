#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mpq {

using LayerId = int;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file (JSON syntax, truncated binary, bad magic).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Structurally invalid graph; carries the offending layer id (-1 when global).
class ValidationError : public Error {
public:
    ValidationError(LayerId layer, const std::string& what)
        : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
    LayerId layer() const noexcept { return layer_; }

private:
    LayerId layer_;
};

/// Policy does not cover the graph, or holds an unsupported bitwidth.
class PolicyError : public Error {
public:
    using Error::Error;
};

/// Budget cannot be met even after demoting every eligible tensor to 2 bits.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// Invalid quantization input (non-finite values, bad scales, out-of-range codes).
class QuantError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

inline bool is_quant_bits(int bits) noexcept { return bits == 2 || bits == 4 || bits == 8; }

/// 2/4/8 are quantized; 32 stands for an unquantized (full-precision) tensor.
inline bool is_policy_bits(int bits) noexcept { return is_quant_bits(bits) || bits == 32; }

/// Round half away from zero; the single rounding rule shared by every path.
inline double round_half_away(double x) noexcept { return std::round(x); }
inline long double round_half_away(long double x) noexcept { return std::round(x); }

inline std::size_t packed_bytes(std::size_t count, int bits) noexcept {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

/// Seeded generator with portable distributions (std:: distributions are
/// implementation-defined, which would break byte-identical reruns).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // rejection keeps the draw unbiased
        const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mpq
