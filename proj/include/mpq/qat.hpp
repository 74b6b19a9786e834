#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "mpq/adam.hpp"
#include "mpq/dataset.hpp"
#include "mpq/engine.hpp"
#include "mpq/quantizer.hpp"

namespace mpq {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 32;
    int epochs = 1;
    std::uint64_t seed = 0;

    /// Throws Error on a non-positive learning rate, batch size < 1 or negative epochs.
    void validate() const;
};

struct TrainResult {
    FloatModel model;
    double val_top1 = 0.0;
    std::vector<double> epoch_loss;  ///< mean training loss per epoch
};

/// Softmax cross-entropy of one sample; writes d(loss)/d(logits) into `dlogits`.
double softmax_xent(std::span<const double> logits, int label, std::span<double> dlogits);

/// Mean loss over `d` and, when `grads` is non-null, the summed per-sample gradients.
double loss_and_grad(const Engine& engine, const Engine::Prepared& p, const Dataset& d, Engine::Gradients* grads);

/// Clipping ranges from a float (ReLU) forward: 99.9th percentile of each
/// activation tensor over the first `max_samples` images, floored at 1e-3.
/// The logits tensor gets no range.
std::map<LayerId, ActRange> calibrate_act_ranges(const NetworkGraph& g, const FloatModel& m, const Dataset& sample,
                                                 std::size_t max_samples = 256);

/// Quantization-aware training: fake-quantized forward under `policy`,
/// straight-through backward, PACT updates of the quantized ranges, Adam.
/// Returns the trained model and fake-quant validation top-1.
/// Throws DivergenceError on a non-finite loss.
TrainResult train_qat(const NetworkGraph& g, FloatModel start, const QuantPolicy& policy, const Dataset& train,
                      const Dataset& val, const TrainConfig& cfg);

/// Full-precision training from a seeded initialization followed by range
/// calibration on the training set.
TrainResult pretrain(const NetworkGraph& g, const Dataset& train, const Dataset& val, const TrainConfig& cfg);

struct FinetuneResult {
    TrainResult train;
    IntModel packed;
};

inline constexpr int kFinetuneEpochs = 15;

/// Longer QAT of the final policy; ranges are rounded to float32 and the
/// integer model is built from the result.
FinetuneResult finetune(const NetworkGraph& g, const FloatModel& start, const QuantPolicy& policy, const Dataset& train,
                        const Dataset& val, const TrainConfig& cfg);

}  // namespace mpq
