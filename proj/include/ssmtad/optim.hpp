#pragma once

#include <cstdint>
#include <vector>

#include "ssmtad/tensor.hpp"

namespace ssmtad {

struct AdamWConfig {
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // decoupled, applied to every owned param
    double clip_norm = 1.0;      // global gradient-norm cap; 0 disables
};

// Decoupled-weight-decay Adam over leaf tensors.  Moments are kept in f64
// regardless of parameter dtype so f32 training stays well conditioned; a
// missing gradient (param untouched by the last graph) counts as zero.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

    // one update at the given learning rate; returns the pre-clip global
    // gradient norm
    double step(double lr);
    void zero_grad();

    int64_t steps_done() const { return t_; }
    void set_steps_done(int64_t t) { t_ = t; }
    const std::vector<Tensor>& params() const { return params_; }
    // moment vectors aligned with params(), exposed for checkpointing
    std::vector<std::vector<double>>& moment_m() { return m_; }
    std::vector<std::vector<double>>& moment_v() { return v_; }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// linear warmup to base_lr over warmup_steps, then cosine decay reaching 0
// at total_steps; step is 0-based
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr);

}  // namespace ssmtad
