#pragma once

#include <vector>

#include "niwf/tensor.hpp"

namespace niwf {

// One optimizable parameter plus its update policy. `update_mask`, when
// non-empty, marks elements the optimizer may touch; masked-off elements are
// skipped entirely (no moment update, no decay), which is what the hard-lock
// base freeze requires.
struct ParamSlot {
    Tensor param;
    bool no_decay = false;                 // normalization gains/biases
    std::vector<uint8_t> update_mask;      // empty = all elements updatable
};

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

// AdamW with decoupled weight decay. Moments are created zeroed; the step
// counter starts at 0 and increases by exactly 1 per step() call.
class AdamW {
public:
    AdamW(std::vector<ParamSlot> params, AdamWConfig cfg);

    void step(float lr);
    void zero_grad();
    int64_t step_count() const { return t_; }

    // Serialization access: moments are ordered exactly like the param slots.
    size_t size() const { return params_.size(); }
    const ParamSlot& slot(size_t i) const { return params_[i]; }
    std::vector<float>& moment_m(size_t i) { return m_[i]; }
    std::vector<float>& moment_v(size_t i) { return v_[i]; }
    void set_step_count(int64_t t) { t_ = t; }
    void set_update_mask(size_t i, std::vector<uint8_t> mask);

private:
    std::vector<ParamSlot> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    AdamWConfig cfg_;
    int64_t t_ = 0;
};

// Scales all gradients by max_norm / g when the global L2 norm g exceeds
// max_norm; returns the applied scale (1 when no clipping happened).
float clip_grad_norm(std::vector<ParamSlot>& params, float max_norm);

struct Schedule {
    float peak_lr = 0.0f;
    int64_t total_steps = 0;
    float warmup_fraction = 0.05f;
};

// Linear warmup from 0 to peak over warmup_fraction of total_steps, then
// cosine decay to exactly 0 at total_steps.
float lr_at_step(const Schedule& s, int64_t step);

}  // namespace niwf
