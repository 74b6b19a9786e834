#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mpq/graph.hpp"

namespace mpq {

/// Per-tensor bitwidths. Weight tensors are keyed by layer id; activation
/// tensors by the id of the producing layer. 32 marks a full-precision tensor.
struct QuantPolicy {
    std::map<LayerId, int> weight_bits;
    std::map<LayerId, int> act_bits;
    std::set<LayerId> frozen_weights;
    std::set<LayerId> frozen_acts;

    /// Every weighted layer at `weight`, every quantizable activation at `act`.
    static QuantPolicy uniform(const NetworkGraph& g, int weight, int act);

    friend bool operator==(const QuantPolicy&, const QuantPolicy&) = default;
};

/// Throws PolicyError unless every weighted layer and quantizable activation
/// has an entry with a supported bitwidth.
void validate_policy(const NetworkGraph& g, const QuantPolicy& p);

struct MemoryBudget {
    std::int64_t rom_bytes = std::numeric_limits<std::int64_t>::max();
    std::int64_t ram_bytes = std::numeric_limits<std::int64_t>::max();

    /// Throws Error when a limit is not strictly positive.
    void validate() const;
};

struct FootprintOptions {
    /// Count int32 biases and the per-channel requantization words in ROM.
    bool include_overheads = true;
};

/// ROM bytes per output channel for multiplier + packed shift/zero-point.
inline constexpr std::int64_t kRequantBytesPerChannel = 8;
inline constexpr std::int64_t kBiasBytes = 4;

struct FootprintReport {
    std::int64_t rom_total = 0;
    std::map<LayerId, std::int64_t> rom_per_layer;
    std::int64_t ram_peak = 0;
    LayerId ram_peak_step = -1;
    std::vector<LayerId> steps;          ///< execution order
    std::vector<std::int64_t> per_step_ram;  ///< parallel to `steps`
};

/// ROM of one weighted layer at `bits`. Full precision (32) carries no
/// requantization words.
std::int64_t layer_rom_bytes(const LayerSpec& layer, int bits, const FootprintOptions& opt = {});

/// Bits used for an activation tensor in RAM. The logits tensor defaults to
/// 32-bit accumulators when the policy leaves it out.
int act_bits_for(const NetworkGraph& g, const QuantPolicy& p, LayerId tensor);

std::int64_t tensor_ram_bytes(const NetworkGraph& g, LayerId tensor, int bits);

FootprintReport rom_footprint(const NetworkGraph& g, const QuantPolicy& p, const FootprintOptions& opt = {});
FootprintReport ram_footprint(const NetworkGraph& g, const QuantPolicy& p);
/// Both parts in one report.
FootprintReport footprint(const NetworkGraph& g, const QuantPolicy& p, const FootprintOptions& opt = {});

struct ConstraintCheck {
    bool m1_ok = false;
    bool m2_ok = false;
    FootprintReport report;
};

ConstraintCheck check_constraints(const NetworkGraph& g, const QuantPolicy& p, const MemoryBudget& b,
                                  const FootprintOptions& opt = {});

/// One level down the ladder 32 -> 8 -> 4 -> 2; returns `bits` at the floor.
int demote(int bits);

/// Demotes the weight tensor with the most packed weight bytes (ties: the wider
/// tensor, then the lowest id) one level at a time until the ROM budget holds. Frozen weights are never
/// touched. Throws InfeasibleError when nothing is left to demote.
QuantPolicy enforce_rom(const NetworkGraph& g, QuantPolicy p, const MemoryBudget& b,
                        const FootprintOptions& opt = {});

/// Same greedy over the non-frozen activation tensors live at the peak RAM step.
QuantPolicy enforce_ram(const NetworkGraph& g, QuantPolicy p, const MemoryBudget& b);

// ---- file formats ----

std::string policy_to_json(const QuantPolicy& p);
QuantPolicy policy_from_json(const std::string& text);
QuantPolicy load_policy(const std::filesystem::path& path);
void save_policy(const QuantPolicy& p, const std::filesystem::path& path);

/// `step,ram_bytes` rows in execution order.
std::string ram_csv(const FootprintReport& r);
/// `layer,rom_bytes` rows by layer id.
std::string rom_csv(const FootprintReport& r);

}  // namespace mpq
