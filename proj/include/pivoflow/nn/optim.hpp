#pragma once
// AdamW (decoupled weight decay) with linear warmup followed by cosine decay.

#include <vector>

#include "pivoflow/nn/param_store.hpp"

namespace pivoflow::nn {

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 1000;
    int total_steps = 1;
    double lr_min = 1e-5;
};

// Linear ramp 0 -> lr over warmup_steps, cosine decay to lr_min at
// total_steps, constant lr_min after.
double lr_schedule(int step, const OptimConfig& cfg);

class AdamW {
public:
    AdamW(ParamStore& store, OptimConfig cfg);

    // Consumes store gradients; lr comes from lr_schedule(step_count()).
    void step();

    // Excludes a tensor from updates entirely (no Adam step, no decay).
    void freeze_tensor(int idx) { frozen_[idx] = true; }

    int step_count() const { return step_; }
    const OptimConfig& config() const { return cfg_; }

private:
    ParamStore* store_;
    OptimConfig cfg_;
    int step_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::vector<bool> frozen_;
};

}  // namespace pivoflow::nn
