#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpq/adam.hpp"
#include "mpq/dataset.hpp"
#include "mpq/memory_model.hpp"
#include "mpq/qat.hpp"

namespace mpq {

enum class SearchMode { independent, concurrent };

std::string_view to_string(SearchMode mode);
SearchMode parse_search_mode(std::string_view name);

/// One tensor whose bitwidth the agent chooses.
struct Decision {
    LayerId id = 0;
    bool is_weight = true;

    friend bool operator==(const Decision&, const Decision&) = default;
};

inline constexpr std::size_t kObsDim = 17;
using Observation = std::array<double, kObsDim>;

/// Feature vector, every entry in [0, 1]:
///   0      layer position in execution order
///   1..8   kind one-hot (conv2d, depthwise, pointwise, fc, add, avg_pool, relu_clip, input)
///   9, 10  in / out channels, log-scaled against the graph maximum
///   11     kernel area / graph maximum
///   12     stride / graph maximum
///   13     weight count, log-scaled against the graph maximum
///   14     produced feature-map size, log-scaled against the graph maximum
///   15     1 for a weight tensor, 0 for an activation
///   16     previous action
Observation observe(const NetworkGraph& g, const Decision& d, double prev_action);

/// Equal thirds of [0, 1]: a < 1/3 -> 2, a < 2/3 -> 4, else 8.
int bits_from_action(double a);
/// Center of the third that maps to `bits`.
double action_center(int bits);

/// Fully connected ReLU network with a linear (or sigmoid) head.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::vector<int> sizes, bool sigmoid_out, Rng& rng);

    struct Cache {
        std::vector<std::vector<double>> act;  ///< per layer input, then output
    };

    std::vector<double> forward(std::span<const double> x, Cache* cache = nullptr) const;
    /// Accumulates parameter gradients into `grad` and returns d(out)/d(input) weighted by `dout`.
    std::vector<double> backward(const Cache& cache, std::span<const double> dout, std::span<double> grad) const;

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t input_size() const { return static_cast<std::size_t>(sizes_.front()); }

    /// this = tau * other + (1 - tau) * this
    void soft_update(const Mlp& other, double tau);

private:
    std::vector<int> sizes_;
    std::vector<std::size_t> offsets_;  ///< start of each layer's weights; biases follow the weights
    std::vector<double> params_;
    bool sigmoid_out_ = false;
};

struct Transition {
    Observation obs{};
    double action = 0.0;
    double reward = 0.0;
    Observation next_obs{};
    bool done = true;
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 100000) : capacity_(capacity) {}
    void push(const Transition& t);
    std::size_t size() const { return items_.size(); }
    const Transition& operator[](std::size_t i) const { return items_[i]; }

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<Transition> items_;
};

struct AgentConfig {
    int hidden = 64;
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    double tau = 0.01;
    double discount = 0.0;
    int batch_size = 64;
    double noise_sigma = 0.5;
    double noise_decay = 0.95;
    std::size_t buffer_capacity = 100000;
};

/// DDPG with one continuous action in [0, 1] per decision.
class DdpgAgent {
public:
    DdpgAgent(const AgentConfig& cfg, std::uint64_t seed);

    /// Actor output for `obs` without exploration.
    double policy(const Observation& obs) const;
    double q_value(const Observation& obs, double action) const;

    /// Warm-up: uniform in [0, 1). Afterwards the actor output plus normal noise of
    /// scale `noise_sigma(episode)`, truncated to [0, 1] by resampling.
    double act(const Observation& obs, int episode, int warmup);
    double noise_sigma(int episode, int warmup) const;

    /// One DDPG step on a minibatch sampled with replacement; skipped (returns
    /// false) while the buffer holds fewer than `batch_size` transitions.
    bool update(const ReplayBuffer& buffer);
    /// Mean squared critic error over the whole buffer.
    double critic_mse(const ReplayBuffer& buffer) const;

    const Mlp& actor() const { return actor_; }
    const Mlp& critic() const { return critic_; }
    const AgentConfig& config() const { return cfg_; }

private:
    AgentConfig cfg_;
    Rng rng_;
    Mlp actor_, critic_, actor_target_, critic_target_;
    Adam actor_opt_, critic_opt_;
    long steps_ = 0;
};

struct SearchConfig {
    int episodes = 300;
    int warmup = 60;
    SearchMode mode = SearchMode::independent;
    MemoryBudget budget;
    FootprintOptions footprint;
    std::uint64_t seed = 0;
    bool freeze_first_last = false;
    AgentConfig agent;
    TrainConfig train;  ///< per-episode QAT (1 epoch by default)

    /// 300/60 for independent (per phase), 600/120 for concurrent.
    static SearchConfig defaults(SearchMode mode);
    void validate() const;
};

struct EpisodeRecord {
    int episode = 0;
    int phase = 0;  ///< 0 concurrent, 1 weight phase, 2 activation phase
    QuantPolicy policy;
    double reward = 0.0;
    double top1 = 0.0;
    std::int64_t rom_bytes = 0;
    std::int64_t ram_bytes = 0;
};

struct SearchResult {
    QuantPolicy best_policy;
    int best_episode = -1;
    double best_top1 = 0.0;
    std::vector<EpisodeRecord> history;
};

/// Fixed part of every episode's policy: residual activations at 8 bits and
/// frozen, optionally the first and last weighted layers at 8 bits and frozen.
/// Activations default to `act_default`, weights to 8.
QuantPolicy base_policy(const NetworkGraph& g, bool freeze_first_last, int act_default);

/// Tensors the agent decides, in order (weights first, then activations).
std::vector<Decision> decisions(const NetworkGraph& g, const QuantPolicy& base, bool weights, bool acts);

/// Runs one episode: act over `todo`, enforce budgets, QAT from `pretrained`,
/// push transitions and update the agent after warm-up.
EpisodeRecord run_episode(const NetworkGraph& g, DdpgAgent& agent, ReplayBuffer& buffer, const SearchConfig& cfg,
                          const ProxySplit& proxy, const FloatModel& pretrained, const QuantPolicy& base,
                          std::span<const Decision> todo, int episode, int phase_episode, bool enforce_ram_budget);

/// Full search. Independent mode runs a weight phase (activations at full
/// precision, ROM enforced) then an activation phase under the best weight
/// policy, each `cfg.episodes` long; concurrent mode decides both per episode.
SearchResult search(const NetworkGraph& g, const SearchConfig& cfg, const ProxySplit& proxy,
                    const FloatModel& pretrained);

/// `episode,top1,rom_bytes,ram_bytes,is_best`; is_best marks the returned best.
std::string history_csv(const SearchResult& r);

}  // namespace mpq
