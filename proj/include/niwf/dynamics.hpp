#pragma once

#include <vector>

#include "niwf/tensor.hpp"

namespace niwf {

// GRU-based recurrent navigator over the capability coordinate space.
// Coordinates are tanh-bounded to (-1, 1)^{d_z}.
struct CoordDynamics {
    // gate weights: input [d_z, d_model], recurrent [d_z, d_z], bias [d_z]
    Tensor w_r, u_r, b_r;
    Tensor w_u, u_u, b_u;
    Tensor w_n, u_n, b_n;
    Tensor ln_gain, ln_bias;  // post-GRU LayerNorm over d_z
    Tensor w_p;               // [d_z, d_z] projection
    int64_t d_model = 0;
    int64_t d_z = 0;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

CoordDynamics make_dynamics(int64_t d_model, int64_t d_z, Rng& rng);

// Standard GRU cell: r = sig(Wr h + Ur z + br), u = sig(Wu h + Uu z + bu),
// n = tanh(Wn h + r * (Un z) + bn), z' = (1-u)*n + u*z.
Tensor gru_cell(const CoordDynamics& dyn, const Tensor& h_in, const Tensor& z);

// z_next = tanh(W_p . LN(GRU(h, z))); the caller passes pooled hidden states
// that are already detached from the backbone graph.
Tensor coord_update(const CoordDynamics& dyn, const Tensor& z, const Tensor& pooled_hidden);

}  // namespace niwf
