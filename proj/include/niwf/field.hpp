#pragma once

#include <vector>

#include "niwf/adapters.hpp"
#include "niwf/tensor.hpp"

namespace niwf {

// F_theta: capability coordinate -> per-layer gating logits over bases.
// Three-layer MLP with input LayerNorm and GELU between layers. The
// formulation omits biases; they are included here zero-initialized.
struct WeightField {
    Tensor ln_gain, ln_bias;  // over d_z
    Tensor w1, b1;            // [d_h, d_z], [d_h]
    Tensor w2, b2;            // [d_h, d_h], [d_h]
    Tensor w3, b3;            // [rows, d_h], [rows]; rows = L*N_b, or N_b when sharing
    int64_t d_z = 0;
    int64_t d_h = 0;
    int64_t n_layers = 0;
    int64_t num_bases = 0;
    bool share_layers = false;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

WeightField make_field(int64_t d_z, int64_t d_h, int64_t n_layers, int64_t num_bases, bool share_layers,
                       Rng& rng);

// z[B, d_z] -> logits [B, L, N_b]. With share_layers one logit row is
// broadcast to all layers.
Tensor field_forward(const WeightField& field, const Tensor& z);

// Per layer: indices = top-k of that row, weights = softmax over exactly the
// selected logits. Gradient flows only through the selected logits.
std::vector<GatingDecision> gate_topk(const Tensor& logits, int64_t k);

// Grows the output head from N_b to N_b + extra bases per layer. New weight
// rows are zero and new bias entries a large negative constant, so fresh
// bases are never selected until trained into.
void expand_field_output(WeightField& field, int64_t extra_bases, float new_logit_bias = -10.0f);

}  // namespace niwf
