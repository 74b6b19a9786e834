#include "mpq/qat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpq/inference.hpp"

namespace mpq {

namespace {

AdamConfig adam_config(const TrainConfig& cfg) { return {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps}; }

/// Mini-batch Adam over the latent weights and, in fake-quant mode, the
/// clipping ranges of the quantized tensors.
void train_loop(const NetworkGraph& g, FloatModel& m, const ForwardConfig& fwd, const Dataset& train,
                const TrainConfig& cfg, std::vector<double>& epoch_loss) {
    if (cfg.epochs == 0) return;
    if (train.size() == 0) throw Error("training set is empty");
    const Engine engine(g);
    const auto& order = engine.order();

    std::vector<std::size_t> weighted;
    std::vector<Adam> w_opt, b_opt;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const LayerSpec& l = g.layer(order[i]);
        if (!l.has_weights()) continue;
        weighted.push_back(i);
        w_opt.emplace_back(static_cast<std::size_t>(l.param_count), adam_config(cfg));
        b_opt.emplace_back(static_cast<std::size_t>(l.bias_count), adam_config(cfg));
    }
    std::vector<std::size_t> ranged;  // positions whose clip is trained
    {
        const auto p = engine.prepare(m, fwd);
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (p.stage[i].kind == Engine::Stage::quant) ranged.push_back(i);
        }
    }
    Adam clip_opt(ranged.size(), adam_config(cfg));

    Rng rng(cfg.seed);
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Engine::Gradients grads = engine.make_gradients();
    Engine::Tape tape;
    std::vector<double> dlogits;
    std::vector<double> clips(ranged.size()), dclips(ranged.size());
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const auto p = engine.prepare(m, fwd);
            grads.zero();
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t s = idx[k];
                engine.forward(p, train.image(s), tape);
                const auto logits = engine.logits(tape);
                dlogits.resize(logits.size());
                batch_loss += softmax_xent(logits, train.labels[s], dlogits);
                engine.backward(p, tape, dlogits, grads);
            }
            if (!std::isfinite(batch_loss)) {
                throw DivergenceError("non-finite training loss in epoch " + std::to_string(epoch));
            }
            loss_sum += batch_loss;
            const double inv = 1.0 / static_cast<double>(end - start);
            ++step;
            for (std::size_t j = 0; j < weighted.size(); ++j) {
                const std::size_t pos = weighted[j];
                LayerParams& lp = m.layers.at(order[pos]);
                for (double& v : grads.weight[pos]) v *= inv;
                for (double& v : grads.bias[pos]) v *= inv;
                w_opt[j].update(lp.weight, grads.weight[pos], step);
                b_opt[j].update(lp.bias, grads.bias[pos], step);
            }
            if (!ranged.empty()) {
                for (std::size_t j = 0; j < ranged.size(); ++j) {
                    clips[j] = m.ranges.at(order[ranged[j]]).clip_max;
                    dclips[j] = grads.clip[ranged[j]] * inv;
                }
                clip_opt.update(clips, dclips, step);
                for (std::size_t j = 0; j < ranged.size(); ++j) {
                    m.ranges.at(order[ranged[j]]).clip_max = std::max(clips[j], kMinClip);
                }
            }
        }
        epoch_loss.push_back(loss_sum / static_cast<double>(idx.size()));
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning rate must be > 0");
    if (batch_size < 1) throw Error("batch size must be >= 1");
    if (epochs < 0) throw Error("epochs must be >= 0");
}

double softmax_xent(std::span<const double> logits, int label, std::span<double> dlogits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        dlogits[c] = std::exp(logits[c] - log_z) - (static_cast<int>(c) == label ? 1.0 : 0.0);
    }
    return log_z - logits[static_cast<std::size_t>(label)];
}

double loss_and_grad(const Engine& engine, const Engine::Prepared& p, const Dataset& d, Engine::Gradients* grads) {
    Engine::Tape tape;
    std::vector<double> dlogits;
    double total = 0.0;
    for (std::size_t s = 0; s < d.size(); ++s) {
        engine.forward(p, d.image(s), tape);
        const auto logits = engine.logits(tape);
        dlogits.resize(logits.size());
        total += softmax_xent(logits, d.labels[s], dlogits);
        if (grads) engine.backward(p, tape, dlogits, *grads);
    }
    return total / static_cast<double>(d.size());
}

std::map<LayerId, ActRange> calibrate_act_ranges(const NetworkGraph& g, const FloatModel& m, const Dataset& sample,
                                                 std::size_t max_samples) {
    const std::size_t n = std::min(sample.size(), max_samples);
    if (n == 0) throw QuantError("empty calibration set");
    const Engine engine(g);
    const auto p = engine.prepare(m, {});
    const auto tensors = g.quantizable_activations();
    std::vector<std::size_t> pos;
    for (LayerId t : tensors) pos.push_back(engine.position(t));
    std::vector<std::vector<double>> seen(tensors.size());
    Engine::Tape tape;
    for (std::size_t s = 0; s < n; ++s) {
        engine.forward(p, sample.image(s), tape);
        for (std::size_t j = 0; j < pos.size(); ++j) {
            const auto& a = tape.post[pos[j]];
            seen[j].insert(seen[j].end(), a.begin(), a.end());
        }
    }
    std::map<LayerId, ActRange> out;
    for (std::size_t j = 0; j < tensors.size(); ++j) {
        out[tensors[j]] = ActRange{tensors[j], percentile_clip(std::move(seen[j]))};
    }
    return out;
}

TrainResult train_qat(const NetworkGraph& g, FloatModel start, const QuantPolicy& policy, const Dataset& train,
                      const Dataset& val, const TrainConfig& cfg) {
    cfg.validate();
    validate_policy(g, policy);
    validate_float_model(g, start);
    TrainResult r;
    r.model = std::move(start);
    const ForwardConfig fwd{ActMode::fake_quant, &policy};
    train_loop(g, r.model, fwd, train, cfg, r.epoch_loss);
    r.val_top1 = evaluate_accuracy(g, r.model, fwd, val).top1;
    return r;
}

TrainResult pretrain(const NetworkGraph& g, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
    cfg.validate();
    TrainResult r;
    r.model = init_float_model(g, cfg.seed);
    train_loop(g, r.model, {}, train, cfg, r.epoch_loss);
    r.model.ranges = calibrate_act_ranges(g, r.model, train);
    r.val_top1 = evaluate_accuracy(g, r.model, ForwardConfig{}, val).top1;
    return r;
}

FinetuneResult finetune(const NetworkGraph& g, const FloatModel& start, const QuantPolicy& policy, const Dataset& train,
                        const Dataset& val, const TrainConfig& cfg) {
    FinetuneResult out;
    out.train = train_qat(g, start, policy, train, val, cfg);
    out.train.model = freeze_ranges(std::move(out.train.model));
    // re-score after rounding so the reported accuracy is the deployed model's
    out.train.val_top1 = evaluate_accuracy(g, out.train.model, {ActMode::fake_quant, &policy}, val).top1;
    out.packed = build_int_model(g, out.train.model, policy);
    return out;
}

}  // namespace mpq
