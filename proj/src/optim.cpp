#include "niwf/optim.hpp"

#include <cmath>

namespace niwf {

AdamW::AdamW(std::vector<ParamSlot> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
        size_t n = static_cast<size_t>(p.param.numel());
        if (!p.update_mask.empty() && p.update_mask.size() != n) {
            throw ContractError("AdamW: update mask length does not match parameter");
        }
        m_.emplace_back(n, 0.0f);
        v_.emplace_back(n, 0.0f);
    }
}

void AdamW::set_update_mask(size_t i, std::vector<uint8_t> mask) {
    if (!mask.empty() && mask.size() != static_cast<size_t>(params_[i].param.numel())) {
        throw ContractError("AdamW: update mask length does not match parameter");
    }
    params_[i].update_mask = std::move(mask);
}

void AdamW::step(float lr) {
    ++t_;
    float bc1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_)));
    float bc2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_)));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        auto& slot = params_[pi];
        auto theta = slot.param.mutable_data();
        auto g = slot.param.grad();
        auto& m = m_[pi];
        auto& v = v_[pi];
        float wd = slot.no_decay ? 0.0f : cfg_.weight_decay;
        size_t n = theta.size();
        for (size_t i = 0; i < n; ++i) {
            if (!slot.update_mask.empty() && slot.update_mask[i] == 0) continue;
            float gi = g.empty() ? 0.0f : g[i];
            m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * gi * gi;
            float mhat = m[i] / bc1;
            float vhat = v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * theta[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.param.zero_grad();
}

float clip_grad_norm(std::vector<ParamSlot>& params, float max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        auto g = p.param.grad();
        for (float v : g) sq += static_cast<double>(v) * v;
    }
    double norm = std::sqrt(sq);
    if (norm <= static_cast<double>(max_norm) || norm == 0.0) return 1.0f;
    float scale = static_cast<float>(static_cast<double>(max_norm) / norm);
    for (auto& p : params) {
        if (!p.param.has_grad()) continue;
        auto g = p.param.grad_buffer();
        for (float& v : g) v *= scale;
    }
    return scale;
}

float lr_at_step(const Schedule& s, int64_t step) {
    if (step < 0 || step > s.total_steps) {
        throw ContractError("lr_at_step: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(s.total_steps) + "]");
    }
    int64_t warmup = static_cast<int64_t>(std::llround(static_cast<double>(s.total_steps) * s.warmup_fraction));
    if (warmup > 0 && step <= warmup) {
        return s.peak_lr * static_cast<float>(static_cast<double>(step) / static_cast<double>(warmup));
    }
    double denom = static_cast<double>(s.total_steps - warmup);
    double progress = denom > 0.0 ? static_cast<double>(step - warmup) / denom : 1.0;
    return s.peak_lr * static_cast<float>(0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
}

}  // namespace niwf
