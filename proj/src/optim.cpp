#include "ssmtad/optim.hpp"

#include <cmath>
#include <set>

namespace ssmtad {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw ValueError("optimizer: empty parameter list");
    std::set<const void*> seen;
    for (const auto& p : params_) {
        if (!p.defined()) throw ValueError("optimizer: undefined parameter");
        if (!p.requires_grad()) throw ValueError("optimizer: parameter does not require grad");
        if (!seen.insert(p.node().get()).second)
            throw ValueError("optimizer: duplicate parameter (aliased tensors must be listed once)");
        m_.emplace_back(size_t(p.numel()), 0.0);
        v_.emplace_back(size_t(p.numel()), 0.0);
    }
}

double AdamW::step(double lr) {
    std::vector<std::vector<double>> grads(params_.size());
    double sq = 0.0;
    for (size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].has_grad()) {
            grads[i] = params_[i].grad_vector();
            for (double g : grads[i]) sq += g * g;
        } else {
            grads[i].assign(size_t(params_[i].numel()), 0.0);
        }
    }
    double norm = std::sqrt(sq);
    double scale = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

    t_++;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& m = m_[i];
        auto& v = v_[i];
        const auto& g = grads[i];
        auto update = [&](double w, size_t k) {
            double gk = g[k] * scale;
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
            double mhat = m[k] / bc1;
            double vhat = v[k] / bc2;
            return w - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w);
        };
        if (params_[i].dtype() == DType::f64) {
            auto& w = params_[i].data_f64();
            for (size_t k = 0; k < w.size(); ++k) w[k] = update(w[k], k);
        } else {
            auto& w = params_[i].data_f32();
            for (size_t k = 0; k < w.size(); ++k) w[k] = float(update(double(w[k]), k));
        }
    }
    return norm;
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
    if (total_steps < 1) throw ValueError("lr_schedule: total_steps must be >= 1");
    if (step < 0 || warmup_steps < 0) throw ValueError("lr_schedule: negative step");
    if (warmup_steps > 0 && step < warmup_steps) return base_lr * double(step + 1) / double(warmup_steps);
    double span = double(std::max<int64_t>(1, total_steps - warmup_steps));
    double progress = std::min(1.0, double(step - warmup_steps) / span);
    return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace ssmtad
