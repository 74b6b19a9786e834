#include "mpq/search.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mpq {

namespace {

constexpr LayerKind kObsKinds[] = {LayerKind::conv2d,      LayerKind::depthwise_conv2d, LayerKind::pointwise_conv2d,
                                   LayerKind::fully_connected, LayerKind::add_residual, LayerKind::avg_pool,
                                   LayerKind::relu_clip,   LayerKind::input};

double log_ratio(double v, double max_v) { return max_v > 0.0 ? std::log1p(v) / std::log1p(max_v) : 0.0; }

struct GraphMaxima {
    double channels = 0, kernel = 0, stride = 0, params = 0, fmap = 0;
};

GraphMaxima maxima(const NetworkGraph& g) {
    GraphMaxima m;
    for (const LayerSpec& l : g.layers()) {
        m.channels = std::max({m.channels, double(l.input_shape.c), double(l.output_shape.c)});
        m.kernel = std::max(m.kernel, double(l.kernel_h * l.kernel_w));
        m.stride = std::max(m.stride, double(l.stride));
        m.params = std::max(m.params, double(l.param_count));
        m.fmap = std::max(m.fmap, double(l.output_shape.numel()));
    }
    return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string_view to_string(SearchMode mode) {
    return mode == SearchMode::concurrent ? "concurrent" : "independent";
}

SearchMode parse_search_mode(std::string_view name) {
    if (name == "concurrent") return SearchMode::concurrent;
    if (name == "independent") return SearchMode::independent;
    throw Error("unknown search mode '" + std::string(name) + "'");
}

Observation observe(const NetworkGraph& g, const Decision& d, double prev_action) {
    const LayerSpec& l = g.layer(d.id);
    const GraphMaxima mx = maxima(g);
    const auto& order = g.order();
    const auto pos = static_cast<double>(std::find(order.begin(), order.end(), d.id) - order.begin());
    Observation o{};
    o[0] = order.size() > 1 ? pos / static_cast<double>(order.size() - 1) : 0.0;
    for (std::size_t k = 0; k < std::size(kObsKinds); ++k) o[1 + k] = l.kind == kObsKinds[k] ? 1.0 : 0.0;
    o[9] = log_ratio(l.input_shape.c, mx.channels);
    o[10] = log_ratio(l.output_shape.c, mx.channels);
    o[11] = mx.kernel > 0 ? l.kernel_h * l.kernel_w / mx.kernel : 0.0;
    o[12] = mx.stride > 0 ? l.stride / mx.stride : 0.0;
    o[13] = log_ratio(static_cast<double>(l.param_count), mx.params);
    o[14] = log_ratio(static_cast<double>(l.output_shape.numel()), mx.fmap);
    o[15] = d.is_weight ? 1.0 : 0.0;
    o[16] = std::clamp(prev_action, 0.0, 1.0);
    return o;
}

int bits_from_action(double a) {
    if (a < 1.0 / 3.0) return 2;
    if (a < 2.0 / 3.0) return 4;
    return 8;
}

double action_center(int bits) {
    switch (bits) {
        case 2: return 1.0 / 6.0;
        case 4: return 0.5;
        default: return 5.0 / 6.0;
    }
}

// ---- Mlp ----

Mlp::Mlp(std::vector<int> sizes, bool sigmoid_out, Rng& rng) : sizes_(std::move(sizes)), sigmoid_out_(sigmoid_out) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        offsets_.push_back(n);
        n += static_cast<std::size_t>(sizes_[l] * sizes_[l + 1] + sizes_[l + 1]);
    }
    params_.assign(n, 0.0);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        const bool last = l + 2 == sizes_.size();
        const double bound = last ? 3e-3 : 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
        const std::size_t count = static_cast<std::size_t>(sizes_[l] * sizes_[l + 1] + sizes_[l + 1]);
        for (std::size_t k = 0; k < count; ++k) params_[offsets_[l] + k] = rng.uniform(-bound, bound);
    }
}

std::vector<double> Mlp::forward(std::span<const double> x, Cache* cache) const {
    std::vector<double> a(x.begin(), x.end());
    if (cache) cache->act.assign(1, a);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        const int in = sizes_[l], out = sizes_[l + 1];
        const double* w = params_.data() + offsets_[l];
        const double* b = w + in * out;
        std::vector<double> z(static_cast<std::size_t>(out));
        for (int o = 0; o < out; ++o) {
            double s = b[o];
            for (int i = 0; i < in; ++i) s += w[o * in + i] * a[static_cast<std::size_t>(i)];
            z[static_cast<std::size_t>(o)] = s;
        }
        const bool last = l + 2 == sizes_.size();
        for (double& v : z) {
            if (!last) {
                v = v > 0.0 ? v : 0.0;
            } else if (sigmoid_out_) {
                v = sigmoid(v);
            }
        }
        a = std::move(z);
        if (cache) cache->act.push_back(a);
    }
    return a;
}

std::vector<double> Mlp::backward(const Cache& cache, std::span<const double> dout, std::span<double> grad) const {
    std::vector<double> d(dout.begin(), dout.end());
    if (sigmoid_out_) {
        const auto& y = cache.act.back();
        for (std::size_t k = 0; k < d.size(); ++k) d[k] *= y[k] * (1.0 - y[k]);
    }
    for (std::size_t l = sizes_.size() - 1; l-- > 0;) {
        const int in = sizes_[l], out = sizes_[l + 1];
        const double* w = params_.data() + offsets_[l];
        double* gw = grad.data() + offsets_[l];
        double* gb = gw + in * out;
        const auto& a = cache.act[l];
        std::vector<double> prev(static_cast<std::size_t>(in), 0.0);
        for (int o = 0; o < out; ++o) {
            const double dv = d[static_cast<std::size_t>(o)];
            gb[o] += dv;
            for (int i = 0; i < in; ++i) {
                gw[o * in + i] += dv * a[static_cast<std::size_t>(i)];
                prev[static_cast<std::size_t>(i)] += dv * w[o * in + i];
            }
        }
        if (l > 0) {
            for (std::size_t i = 0; i < prev.size(); ++i) {
                if (!(a[i] > 0.0)) prev[i] = 0.0;
            }
        }
        d = std::move(prev);
    }
    return d;
}

void Mlp::soft_update(const Mlp& other, double tau) {
    for (std::size_t k = 0; k < params_.size(); ++k) params_[k] = tau * other.params_[k] + (1.0 - tau) * params_[k];
}

// ---- replay buffer ----

void ReplayBuffer::push(const Transition& t) {
    if (items_.size() < capacity_) {
        items_.push_back(t);
    } else {
        items_[next_] = t;
    }
    next_ = (next_ + 1) % capacity_;
}

// ---- agent ----

DdpgAgent::DdpgAgent(const AgentConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    const int obs = static_cast<int>(kObsDim);
    actor_ = Mlp({obs, cfg.hidden, cfg.hidden, 1}, true, rng_);
    critic_ = Mlp({obs + 1, cfg.hidden, cfg.hidden, 1}, false, rng_);
    actor_target_ = actor_;
    critic_target_ = critic_;
    actor_opt_ = Adam(actor_.params().size(), {cfg.actor_lr, 0.9, 0.999, 1e-8});
    critic_opt_ = Adam(critic_.params().size(), {cfg.critic_lr, 0.9, 0.999, 1e-8});
}

double DdpgAgent::policy(const Observation& obs) const { return actor_.forward(obs)[0]; }

double DdpgAgent::q_value(const Observation& obs, double action) const {
    std::array<double, kObsDim + 1> x{};
    std::copy(obs.begin(), obs.end(), x.begin());
    x[kObsDim] = action;
    return critic_.forward(x)[0];
}

double DdpgAgent::noise_sigma(int episode, int warmup) const {
    return cfg_.noise_sigma * std::pow(cfg_.noise_decay, static_cast<double>(std::max(0, episode - warmup)));
}

double DdpgAgent::act(const Observation& obs, int episode, int warmup) {
    if (episode < warmup) return rng_.uniform();
    const double mu = policy(obs);
    const double sigma = noise_sigma(episode, warmup);
    if (!(sigma > 0.0)) return mu;
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double a = mu + sigma * rng_.normal();
        if (a >= 0.0 && a <= 1.0) return a;
    }
    return std::clamp(mu, 0.0, 1.0);
}

bool DdpgAgent::update(const ReplayBuffer& buffer) {
    const auto batch = static_cast<std::size_t>(cfg_.batch_size);
    if (buffer.size() < batch || batch == 0) return false;
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = static_cast<std::size_t>(rng_.below(buffer.size()));

    std::vector<double> critic_grad(critic_.params().size(), 0.0);
    std::array<double, kObsDim + 1> x{};
    Mlp::Cache cache;
    for (std::size_t i : idx) {
        const Transition& t = buffer[i];
        double y = t.reward;
        if (!t.done && cfg_.discount != 0.0) {
            std::copy(t.next_obs.begin(), t.next_obs.end(), x.begin());
            x[kObsDim] = actor_target_.forward(t.next_obs)[0];
            y += cfg_.discount * critic_target_.forward(x)[0];
        }
        std::copy(t.obs.begin(), t.obs.end(), x.begin());
        x[kObsDim] = t.action;
        const double q = critic_.forward(x, &cache)[0];
        const double dq = 2.0 * (q - y) / static_cast<double>(batch);
        critic_.backward(cache, std::span<const double>(&dq, 1), critic_grad);
    }

    std::vector<double> actor_grad(actor_.params().size(), 0.0);
    std::vector<double> scratch(critic_.params().size());
    Mlp::Cache actor_cache;
    for (std::size_t i : idx) {
        const Transition& t = buffer[i];
        const double a = actor_.forward(t.obs, &actor_cache)[0];
        std::copy(t.obs.begin(), t.obs.end(), x.begin());
        x[kObsDim] = a;
        critic_.forward(x, &cache);
        const double one = 1.0;
        const auto dx = critic_.backward(cache, std::span<const double>(&one, 1), scratch);
        // ascend Q: minimize -Q
        const double da = -dx[kObsDim] / static_cast<double>(batch);
        actor_.backward(actor_cache, std::span<const double>(&da, 1), actor_grad);
    }

    ++steps_;
    critic_opt_.update(critic_.params(), critic_grad, steps_);
    actor_opt_.update(actor_.params(), actor_grad, steps_);
    critic_target_.soft_update(critic_, cfg_.tau);
    actor_target_.soft_update(actor_, cfg_.tau);
    return true;
}

double DdpgAgent::critic_mse(const ReplayBuffer& buffer) const {
    double s = 0.0;
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const double e = q_value(buffer[i].obs, buffer[i].action) - buffer[i].reward;
        s += e * e;
    }
    return buffer.size() ? s / static_cast<double>(buffer.size()) : 0.0;
}

// ---- search driver ----

SearchConfig SearchConfig::defaults(SearchMode mode) {
    SearchConfig c;
    c.mode = mode;
    if (mode == SearchMode::concurrent) {
        c.episodes = 600;
        c.warmup = 120;
    }
    return c;
}

void SearchConfig::validate() const {
    if (episodes < 1) throw Error("episodes must be >= 1");
    if (warmup < 0 || warmup > episodes) throw Error("warm-up must lie in [0, episodes]");
    budget.validate();
    train.validate();
    if (agent.batch_size < 1 || agent.hidden < 1) throw Error("agent batch size and hidden width must be >= 1");
}

QuantPolicy base_policy(const NetworkGraph& g, bool freeze_first_last, int act_default) {
    QuantPolicy p = QuantPolicy::uniform(g, 8, act_default);
    for (LayerId t : g.residual_tensors()) {
        if (!p.act_bits.count(t)) continue;
        p.act_bits[t] = 8;
        p.frozen_acts.insert(t);
    }
    const auto weighted = g.weighted_layers();
    if (freeze_first_last && !weighted.empty()) {
        for (LayerId id : {weighted.front(), weighted.back()}) {
            p.weight_bits[id] = 8;
            p.frozen_weights.insert(id);
        }
    }
    return p;
}

std::vector<Decision> decisions(const NetworkGraph& g, const QuantPolicy& base, bool weights, bool acts) {
    std::vector<Decision> out;
    if (weights) {
        for (LayerId id : g.weighted_layers()) {
            if (!base.frozen_weights.count(id)) out.push_back({id, true});
        }
    }
    if (acts) {
        for (LayerId id : g.quantizable_activations()) {
            if (!base.frozen_acts.count(id)) out.push_back({id, false});
        }
    }
    return out;
}

EpisodeRecord run_episode(const NetworkGraph& g, DdpgAgent& agent, ReplayBuffer& buffer, const SearchConfig& cfg,
                          const ProxySplit& proxy, const FloatModel& pretrained, const QuantPolicy& base,
                          std::span<const Decision> todo, int episode, int phase_episode, bool enforce_ram_budget) {
    std::vector<Observation> obs;
    std::vector<double> actions;
    QuantPolicy p = base;
    double prev = 0.0;
    for (const Decision& d : todo) {
        obs.push_back(observe(g, d, prev));
        const double a = agent.act(obs.back(), phase_episode, cfg.warmup);
        actions.push_back(a);
        (d.is_weight ? p.weight_bits : p.act_bits)[d.id] = bits_from_action(a);
        prev = a;
    }

    try {
        p = enforce_rom(g, std::move(p), cfg.budget, cfg.footprint);
        if (enforce_ram_budget) p = enforce_ram(g, std::move(p), cfg.budget);
    } catch (const InfeasibleError& e) {
        throw InfeasibleError(std::string("search aborted in episode ") + std::to_string(episode) + ": " + e.what());
    }

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(episode);
    const TrainResult tr = train_qat(g, pretrained, p, proxy.train, proxy.val, tc);
    const FootprintReport fr = footprint(g, p, cfg.footprint);

    EpisodeRecord rec;
    rec.episode = episode;
    rec.policy = p;
    rec.top1 = tr.val_top1;
    rec.reward = tr.val_top1;
    rec.rom_bytes = fr.rom_total;
    rec.ram_bytes = fr.ram_peak;

    for (std::size_t t = 0; t < todo.size(); ++t) {
        const Decision& d = todo[t];
        const int chosen = bits_from_action(actions[t]);
        const int kept = (d.is_weight ? p.weight_bits : p.act_bits).at(d.id);
        Transition tr_t;
        tr_t.obs = obs[t];
        // enforcement overrode the agent; learn from what was actually evaluated
        tr_t.action = chosen == kept ? actions[t] : action_center(kept);
        tr_t.reward = rec.reward;
        tr_t.done = t + 1 == todo.size();
        if (!tr_t.done) tr_t.next_obs = obs[t + 1];
        buffer.push(tr_t);
    }
    if (phase_episode >= cfg.warmup) {
        for (std::size_t k = 0; k < todo.size(); ++k) agent.update(buffer);
    }
    return rec;
}

namespace {

/// Runs one search phase; returns the index (into `history`) of its best record.
std::size_t run_phase(const NetworkGraph& g, const SearchConfig& cfg, const ProxySplit& proxy,
                      const FloatModel& pretrained, const QuantPolicy& base, std::span<const Decision> todo, int phase,
                      std::uint64_t agent_seed, bool enforce_ram_budget, std::vector<EpisodeRecord>& history) {
    if (todo.empty()) throw Error("search has no tensors left to decide");
    DdpgAgent agent(cfg.agent, agent_seed);
    ReplayBuffer buffer(cfg.agent.buffer_capacity);
    std::size_t best = history.size();
    for (int e = 0; e < cfg.episodes; ++e) {
        EpisodeRecord rec = run_episode(g, agent, buffer, cfg, proxy, pretrained, base, todo,
                                        static_cast<int>(history.size()), e, enforce_ram_budget);
        rec.phase = phase;
        history.push_back(std::move(rec));
        if (best == history.size() - 1 || history.back().top1 > history[best].top1) best = history.size() - 1;
    }
    return best;
}

}  // namespace

SearchResult search(const NetworkGraph& g, const SearchConfig& cfg, const ProxySplit& proxy,
                    const FloatModel& pretrained) {
    cfg.validate();
    validate_float_model(g, pretrained);
    SearchResult r;
    std::size_t best = 0;
    if (cfg.mode == SearchMode::concurrent) {
        const QuantPolicy base = base_policy(g, cfg.freeze_first_last, 8);
        const auto todo = decisions(g, base, true, true);
        best = run_phase(g, cfg, proxy, pretrained, base, todo, 0, cfg.seed, true, r.history);
    } else {
        const QuantPolicy base1 = base_policy(g, cfg.freeze_first_last, 32);
        const auto todo1 = decisions(g, base1, true, false);
        const std::size_t best1 = run_phase(g, cfg, proxy, pretrained, base1, todo1, 1, cfg.seed, false, r.history);

        QuantPolicy base2 = base_policy(g, cfg.freeze_first_last, 8);
        base2.weight_bits = r.history[best1].policy.weight_bits;
        for (const auto& [id, bits] : base2.weight_bits) base2.frozen_weights.insert(id);
        const auto todo2 = decisions(g, base2, false, true);
        best = run_phase(g, cfg, proxy, pretrained, base2, todo2, 2, cfg.seed + 1, true, r.history);
    }
    r.best_episode = r.history[best].episode;
    r.best_policy = r.history[best].policy;
    r.best_top1 = r.history[best].top1;
    return r;
}

std::string history_csv(const SearchResult& r) {
    std::ostringstream os;
    os.precision(17);
    os << "episode,top1,rom_bytes,ram_bytes,is_best\n";
    for (const EpisodeRecord& e : r.history) {
        os << e.episode << ',' << e.top1 << ',' << e.rom_bytes << ',' << e.ram_bytes << ','
           << (e.episode == r.best_episode ? 1 : 0) << '\n';
    }
    return os.str();
}

}  // namespace mpq
