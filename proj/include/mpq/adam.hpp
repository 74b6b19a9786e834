#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace mpq {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam moments for one flat parameter vector.
class Adam {
public:
    Adam() = default;
    Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    /// params -= lr * m_hat / (sqrt(v_hat) + eps); `step` is the shared 1-based step count.
    void update(std::span<double> params, std::span<const double> grad, long step) {
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
        }
    }

    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<double> m_;
    std::vector<double> v_;
};

}  // namespace mpq
