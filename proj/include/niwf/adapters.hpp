#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "niwf/tensor.hpp"

namespace niwf {

// Bank of low-rank factor pairs for one wrapped projection. A is
// zero-initialized and B Kaiming-uniform, so every initial delta A_b.B_b is
// exactly zero. A base with trainable_mask=false must never change.
struct AdapterBank {
    Tensor a;  // [N_b, d_out, r]
    Tensor b;  // [N_b, r, d_in]
    int64_t rank = 0;
    int64_t num_bases = 0;
    int64_t d_in = 0;
    int64_t d_out = 0;
    float alpha = 1.0f;
    std::vector<uint8_t> trainable_mask;  // per base, 1 = trainable
};

AdapterBank init_bank(int64_t d_in, int64_t d_out, int64_t r, int64_t n_b, float alpha, Rng& rng);

// Appends freshly initialized bases (A zero, B Kaiming-uniform); existing
// factor tensors and mask entries are preserved bit-exact.
AdapterBank expand_bank(const AdapterBank& bank, int64_t extra_bases, Rng& rng);

// One per-layer gating outcome: for every batch row, k distinct base indices
// and softmax weights over exactly the selected logits. Shape is [B, k] --
// sequence-level gating, never per-token.
struct GatingDecision {
    IntArray indices;  // [B, k]
    Tensor weights;    // [B, k], rows sum to 1
    int64_t k = 0;
};

// Gating decisions for the current forward pass, keyed "layer.module".
// Populated before the backbone forward begins and cleared after.
class GatingRegistry {
public:
    void set(const std::string& key, std::shared_ptr<const GatingDecision> decision);
    const GatingDecision* find(const std::string& key) const;  // nullptr when absent
    void clear();
    size_t size() const { return entries_.size(); }

private:
    std::map<std::string, std::shared_ptr<const GatingDecision>> entries_;
};

// Gated factored forward, Δy = (α/r) Σ_j w_j (x B_{S_j}^T) A_{S_j}^T, added to
// the base projection x W_base^T. The contraction runs through the rank
// bottleneck: the largest adapter intermediate has B*T*k*r elements.
Tensor niwf_linear_forward(const Tensor& x, const Tensor& w_base, const AdapterBank& bank,
                           const GatingDecision& decision);

// Adapter contribution alone (the fused op used by niwf_linear_forward).
Tensor adapter_delta(const Tensor& x, const AdapterBank& bank, const GatingDecision& decision);

// Naive reference: materializes ΔW = (α/r) Σ w_b A_b B_b per batch row and
// applies x (W_base + ΔW)^T. Small dims only; exists to validate the factored
// path and is never called by it.
Tensor dense_delta_oracle(const Tensor& x, const Tensor& w_base, const AdapterBank& bank,
                          const GatingDecision& decision);

}  // namespace niwf
