#include "pivoflow/nn/optim.hpp"

#include <cmath>

#include "pivoflow/kernels.hpp"

namespace pivoflow::nn {

double lr_schedule(int step, const OptimConfig& cfg) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
    if (step >= cfg.total_steps) return cfg.lr_min;
    const int span = cfg.total_steps - cfg.warmup_steps;
    if (span <= 0) return cfg.lr_min;
    const double tau = static_cast<double>(step - cfg.warmup_steps) / span;
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * tau));
}

AdamW::AdamW(ParamStore& store, OptimConfig cfg) : store_(&store), cfg_(cfg) {
    m_.resize(store.count());
    v_.resize(store.count());
    frozen_.assign(store.count(), false);
    for (int i = 0; i < store.count(); ++i) {
        m_[i].assign(store.at(i).size(), 0.0);
        v_[i].assign(store.at(i).size(), 0.0);
    }
}

void AdamW::step() {
    const double lr = lr_schedule(step_, cfg_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    const auto& K = kernels::active();
    for (int i = 0; i < store_->count(); ++i) {
        if (frozen_[i]) continue;
        Tensor& t = store_->at(i);
        K.adamw_update(t.value.data(), t.grad.data(), m_[i].data(), v_[i].data(), t.size(), lr,
                       cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay, bc1, bc2);
    }
}

}  // namespace pivoflow::nn
