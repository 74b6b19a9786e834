#pragma once

#include <span>
#include <vector>

#include "mpq/memory_model.hpp"
#include "mpq/params.hpp"

namespace mpq {

/// How activation tensors are treated between layers.
enum class ActMode {
    float_relu,  ///< ReLU only, no quantization
    surrogate,   ///< clamp to [0, clip]; the smooth stand-in the STE differentiates
    fake_quant,  ///< weights, biases and activations quantized per policy
};

struct ForwardConfig {
    ActMode mode = ActMode::float_relu;
    const QuantPolicy* policy = nullptr;  ///< required unless mode is float_relu
};

/// Float execution of a graph with optional fake quantization and a
/// straight-through backward pass. Single-sample; callers own batching.
class Engine {
public:
    explicit Engine(const NetworkGraph& g);

    /// Activation treatment of one produced tensor.
    struct Stage {
        enum Kind { none, relu, clamp, quant } kind = none;
        double clip = 0.0;
        int bits = 32;
    };

    /// Effective (possibly fake-quantized) parameters for one config.
    struct Prepared {
        std::vector<std::vector<double>> weight;  ///< by execution position
        std::vector<std::vector<double>> bias;
        std::vector<Stage> stage;
        std::vector<double> add_grid;  ///< output step for quantized residual adds, else 0
    };

    /// Per-position activations: `pre` before the activation stage, `post` after.
    struct Tape {
        std::vector<std::vector<double>> pre;
        std::vector<std::vector<double>> post;
    };

    struct Gradients {
        std::vector<std::vector<double>> weight;
        std::vector<std::vector<double>> bias;
        std::vector<double> clip;  ///< by position of the tensor owning the range

        void zero();
    };

    Prepared prepare(const FloatModel& m, const ForwardConfig& cfg) const;
    void forward(const Prepared& p, std::span<const double> image, Tape& tape) const;
    std::span<const double> logits(const Tape& tape) const;

    /// Accumulates d(loss)/d(params) for one sample into `grads`.
    void backward(const Prepared& p, const Tape& tape, std::span<const double> dlogits, Gradients& grads) const;
    Gradients make_gradients() const;

    const NetworkGraph& graph() const { return g_; }
    const std::vector<LayerId>& order() const { return order_; }
    std::size_t position(LayerId id) const;

private:
    const NetworkGraph& g_;
    std::vector<LayerId> order_;
    std::vector<std::vector<std::size_t>> inputs_;  ///< producer positions per position
    std::size_t logits_pos_ = 0;
};

/// Float reference forward; fake quantization when `cfg` asks for it.
std::vector<double> run_network_float(const NetworkGraph& g, const FloatModel& m, std::span<const double> image,
                                      const ForwardConfig& cfg = {});

}  // namespace mpq
