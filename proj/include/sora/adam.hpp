#pragma once

#include "sora/tensor.hpp"

#include <cstdint>
#include <vector>

namespace sora {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam. One instance owns the moment state for a fixed list
// of parameters; callers must pass the same tensors in the same order on
// every step. Fully deterministic.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

    std::int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::int64_t t_ = 0;
};

} // namespace sora
