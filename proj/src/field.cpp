#include "niwf/field.hpp"

namespace niwf {

std::vector<std::pair<std::string, Tensor>> WeightField::named_parameters() const {
    return {
        {"field.ln.gain", ln_gain}, {"field.ln.bias", ln_bias}, {"field.w1", w1}, {"field.b1", b1},
        {"field.w2", w2},           {"field.b2", b2},           {"field.w3", w3}, {"field.b3", b3},
    };
}

WeightField make_field(int64_t d_z, int64_t d_h, int64_t n_layers, int64_t num_bases, bool share_layers,
                       Rng& rng) {
    if (d_z <= 0 || d_h <= 0 || n_layers <= 0 || num_bases <= 0) {
        throw ContractError("make_field: extents must be positive");
    }
    WeightField f;
    f.d_z = d_z;
    f.d_h = d_h;
    f.n_layers = n_layers;
    f.num_bases = num_bases;
    f.share_layers = share_layers;
    int64_t rows = share_layers ? num_bases : n_layers * num_bases;
    f.ln_gain = Tensor::full({d_z}, 1.0f, true);
    f.ln_bias = Tensor::zeros({d_z}, true);
    f.w1 = Tensor::kaiming_uniform({d_h, d_z}, d_z, rng, true);
    f.b1 = Tensor::zeros({d_h}, true);
    f.w2 = Tensor::kaiming_uniform({d_h, d_h}, d_h, rng, true);
    f.b2 = Tensor::zeros({d_h}, true);
    f.w3 = Tensor::kaiming_uniform({rows, d_h}, d_h, rng, true);
    f.b3 = Tensor::zeros({rows}, true);
    return f;
}

Tensor field_forward(const WeightField& field, const Tensor& z) {
    if (z.ndim() != 2 || z.dim(1) != field.d_z) {
        throw ContractError("field_forward: coordinate shape " + shape_str(z.shape()) +
                            " does not match d_z " + std::to_string(field.d_z));
    }
    int64_t b = z.dim(0);
    Tensor h = layer_norm(z, field.ln_gain, field.ln_bias, 1e-5f);
    h = activation(add(linear(h, field.w1), field.b1), Act::Gelu);
    h = activation(add(linear(h, field.w2), field.b2), Act::Gelu);
    Tensor logits = add(linear(h, field.w3), field.b3);  // [B, rows]
    if (field.share_layers) {
        // broadcast the single row across layers
        Tensor out = OpCtx::make({b, field.n_layers, field.num_bases}, logits.requires_grad());
        auto lv = logits.data();
        auto ov = out.mutable_data();
        for (int64_t i = 0; i < b; ++i) {
            for (int64_t l = 0; l < field.n_layers; ++l) {
                std::copy(lv.data() + i * field.num_bases, lv.data() + (i + 1) * field.num_bases,
                          ov.data() + (i * field.n_layers + l) * field.num_bases);
            }
        }
        if (out.requires_grad()) {
            int64_t nl = field.n_layers, nb = field.num_bases;
            OpCtx::record(out, [logits, out, b, nl, nb] {
                auto g = OpCtx::grad_of(out);
                auto gl = OpCtx::grad_acc(logits);
                for (int64_t i = 0; i < b; ++i) {
                    for (int64_t l = 0; l < nl; ++l) {
                        const float* src = g.data() + (i * nl + l) * nb;
                        float* dst = gl.data() + i * nb;
                        for (int64_t j = 0; j < nb; ++j) dst[j] += src[j];
                    }
                }
            });
        }
        return out;
    }
    return reshape(logits, {b, field.n_layers, field.num_bases});
}

std::vector<GatingDecision> gate_topk(const Tensor& logits, int64_t k) {
    if (logits.ndim() != 3) throw ShapeError("gate_topk: logits must be [B, L, N_b]");
    int64_t layers = logits.dim(1);
    std::vector<GatingDecision> decisions;
    decisions.reserve(static_cast<size_t>(layers));
    for (int64_t l = 0; l < layers; ++l) {
        Tensor row = slice_axis1(logits, l);  // [B, N_b]
        TopKResult tk = top_k(row, k);
        GatingDecision d;
        d.indices = tk.indices;
        d.weights = softmax(tk.values, 1);
        d.k = k;
        decisions.push_back(std::move(d));
    }
    return decisions;
}

void expand_field_output(WeightField& field, int64_t extra_bases, float new_logit_bias) {
    if (extra_bases < 1) throw ContractError("expand_field_output: extra_bases must be >= 1");
    int64_t nb_old = field.num_bases;
    int64_t nb_new = nb_old + extra_bases;
    int64_t groups = field.share_layers ? 1 : field.n_layers;
    Tensor w3 = Tensor::zeros({groups * nb_new, field.d_h}, true);
    Tensor b3 = Tensor::full({groups * nb_new}, new_logit_bias, true);
    auto wv = w3.mutable_data();
    auto bv = b3.mutable_data();
    auto ow = field.w3.data();
    auto ob = field.b3.data();
    for (int64_t g = 0; g < groups; ++g) {
        for (int64_t b = 0; b < nb_old; ++b) {
            std::copy(ow.data() + (g * nb_old + b) * field.d_h, ow.data() + (g * nb_old + b + 1) * field.d_h,
                      wv.data() + (g * nb_new + b) * field.d_h);
            bv[g * nb_new + b] = ob[g * nb_old + b];
        }
    }
    field.w3 = w3;
    field.b3 = b3;
    field.num_bases = nb_new;
}

}  // namespace niwf
