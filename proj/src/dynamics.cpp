#include "niwf/dynamics.hpp"

namespace niwf {

std::vector<std::pair<std::string, Tensor>> CoordDynamics::named_parameters() const {
    return {
        {"dyn.gru.w_r", w_r}, {"dyn.gru.u_r", u_r}, {"dyn.gru.b_r", b_r},
        {"dyn.gru.w_u", w_u}, {"dyn.gru.u_u", u_u}, {"dyn.gru.b_u", b_u},
        {"dyn.gru.w_n", w_n}, {"dyn.gru.u_n", u_n}, {"dyn.gru.b_n", b_n},
        {"dyn.ln.gain", ln_gain}, {"dyn.ln.bias", ln_bias}, {"dyn.w_p", w_p},
    };
}

CoordDynamics make_dynamics(int64_t d_model, int64_t d_z, Rng& rng) {
    if (d_model <= 0 || d_z <= 0) throw ContractError("make_dynamics: extents must be positive");
    CoordDynamics d;
    d.d_model = d_model;
    d.d_z = d_z;
    auto w_in = [&] { return Tensor::kaiming_uniform({d_z, d_model}, d_model, rng, true); };
    auto w_rec = [&] { return Tensor::kaiming_uniform({d_z, d_z}, d_z, rng, true); };
    d.w_r = w_in(); d.u_r = w_rec(); d.b_r = Tensor::zeros({d_z}, true);
    d.w_u = w_in(); d.u_u = w_rec(); d.b_u = Tensor::zeros({d_z}, true);
    d.w_n = w_in(); d.u_n = w_rec(); d.b_n = Tensor::zeros({d_z}, true);
    d.ln_gain = Tensor::full({d_z}, 1.0f, true);
    d.ln_bias = Tensor::zeros({d_z}, true);
    d.w_p = Tensor::kaiming_uniform({d_z, d_z}, d_z, rng, true);
    return d;
}

Tensor gru_cell(const CoordDynamics& dyn, const Tensor& h_in, const Tensor& z) {
    if (h_in.ndim() != 2 || h_in.dim(1) != dyn.d_model || z.ndim() != 2 || z.dim(1) != dyn.d_z ||
        h_in.dim(0) != z.dim(0)) {
        throw ShapeError("gru_cell: inputs " + shape_str(h_in.shape()) + ", " + shape_str(z.shape()) +
                         " incompatible with (d_model=" + std::to_string(dyn.d_model) +
                         ", d_z=" + std::to_string(dyn.d_z) + ")");
    }
    Tensor r = activation(add(add(linear(h_in, dyn.w_r), linear(z, dyn.u_r)), dyn.b_r), Act::Sigmoid);
    Tensor u = activation(add(add(linear(h_in, dyn.w_u), linear(z, dyn.u_u)), dyn.b_u), Act::Sigmoid);
    Tensor n = activation(add(add(linear(h_in, dyn.w_n), mul(r, linear(z, dyn.u_n))), dyn.b_n), Act::Tanh);
    // (1-u)*n + u*z
    Tensor one_minus_u = add_scalar(mul_scalar(u, -1.0f), 1.0f);
    return add(mul(one_minus_u, n), mul(u, z));
}

Tensor coord_update(const CoordDynamics& dyn, const Tensor& z, const Tensor& pooled_hidden) {
    Tensor g = gru_cell(dyn, pooled_hidden, z);
    Tensor h = layer_norm(g, dyn.ln_gain, dyn.ln_bias, 1e-5f);
    return activation(linear(h, dyn.w_p), Act::Tanh);
}

}  // namespace niwf
