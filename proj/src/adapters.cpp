#include "niwf/adapters.hpp"

#include <algorithm>
#include <cmath>

namespace niwf {

AdapterBank init_bank(int64_t d_in, int64_t d_out, int64_t r, int64_t n_b, float alpha, Rng& rng) {
    if (d_in <= 0 || d_out <= 0 || r <= 0 || n_b <= 0) throw ContractError("init_bank: extents must be positive");
    if (r > std::min(d_in, d_out)) {
        throw ContractError("init_bank: rank " + std::to_string(r) + " exceeds min(d_in, d_out) = " +
                            std::to_string(std::min(d_in, d_out)));
    }
    AdapterBank bank;
    bank.rank = r;
    bank.num_bases = n_b;
    bank.d_in = d_in;
    bank.d_out = d_out;
    bank.alpha = alpha;
    bank.a = Tensor::zeros({n_b, d_out, r}, true);
    bank.b = Tensor::kaiming_uniform({n_b, r, d_in}, d_in, rng, true);
    bank.trainable_mask.assign(static_cast<size_t>(n_b), 1);
    return bank;
}

AdapterBank expand_bank(const AdapterBank& bank, int64_t extra_bases, Rng& rng) {
    if (extra_bases < 1) throw ContractError("expand_bank: extra_bases must be >= 1");
    AdapterBank out;
    out.rank = bank.rank;
    out.num_bases = bank.num_bases + extra_bases;
    out.d_in = bank.d_in;
    out.d_out = bank.d_out;
    out.alpha = bank.alpha;
    out.a = Tensor::zeros({out.num_bases, bank.d_out, bank.rank}, true);
    out.b = Tensor::kaiming_uniform({out.num_bases, bank.rank, bank.d_in}, bank.d_in, rng, true);
    auto av = out.a.mutable_data();
    auto bv = out.b.mutable_data();
    std::copy(bank.a.data().begin(), bank.a.data().end(), av.begin());
    std::copy(bank.b.data().begin(), bank.b.data().end(), bv.begin());
    out.trainable_mask = bank.trainable_mask;
    out.trainable_mask.resize(static_cast<size_t>(out.num_bases), 1);
    return out;
}

void GatingRegistry::set(const std::string& key, std::shared_ptr<const GatingDecision> decision) {
    entries_[key] = std::move(decision);
}

const GatingDecision* GatingRegistry::find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : it->second.get();
}

void GatingRegistry::clear() { entries_.clear(); }

namespace {

void check_decision(const AdapterBank& bank, const GatingDecision& decision, int64_t batch) {
    if (decision.k > bank.num_bases) throw ContractError("gating: k exceeds bank size");
    if (decision.indices.shape != Shape{batch, decision.k}) {
        throw ShapeError("gating: indices shape " + shape_str(decision.indices.shape) +
                         " does not match [B,k] = [" + std::to_string(batch) + "," +
                         std::to_string(decision.k) + "]");
    }
    for (int32_t idx : decision.indices.v) {
        if (idx < 0 || idx >= bank.num_bases) {
            throw ContractError("gating: base index " + std::to_string(idx) + " outside bank of " +
                                std::to_string(bank.num_bases));
        }
    }
}

}  // namespace

Tensor adapter_delta(const Tensor& x, const AdapterBank& bank, const GatingDecision& decision) {
    if (x.ndim() != 3 || x.dim(2) != bank.d_in) {
        throw ShapeError("adapter_delta: input " + shape_str(x.shape()) + " incompatible with d_in " +
                         std::to_string(bank.d_in));
    }
    int64_t bsz = x.dim(0), t = x.dim(1), din = bank.d_in, dout = bank.d_out, r = bank.rank, k = decision.k;
    check_decision(bank, decision, bsz);
    float scale = bank.alpha / static_cast<float>(bank.rank);

    const Tensor a = bank.a;
    const Tensor b = bank.b;
    const Tensor w = decision.weights;
    const IntArray idx = decision.indices;

    bool rg = OpCtx::grad_enabled() &&
              (x.requires_grad() || a.requires_grad() || b.requires_grad() || w.requires_grad());
    Tensor out = OpCtx::make({bsz, t, dout}, rg);

    // h[b,j] = x[b] . B_{S_j}^T, shape [T, r]; the only saved intermediate.
    std::vector<float> h(static_cast<size_t>(bsz * k * t * r), 0.0f);
    {
        auto xv = x.data();
        auto bv = b.data();
        auto wv = w.data();
        auto av = a.data();
        auto ov = out.mutable_data();
        for (int64_t bi = 0; bi < bsz; ++bi) {
            for (int64_t j = 0; j < k; ++j) {
                int64_t s = idx.v[static_cast<size_t>(bi * k + j)];
                const float* bmat = bv.data() + s * r * din;  // [r, d_in]
                float* hj = h.data() + (bi * k + j) * t * r;
                for (int64_t ti = 0; ti < t; ++ti) {
                    const float* xr = xv.data() + (bi * t + ti) * din;
                    for (int64_t ri = 0; ri < r; ++ri) {
                        const float* brow = bmat + ri * din;
                        float acc = 0.0f;
                        for (int64_t i = 0; i < din; ++i) acc += xr[i] * brow[i];
                        hj[ti * r + ri] = acc;
                    }
                }
                // out[b] += scale * w_j * h_j . A_{S_j}^T
                const float* amat = av.data() + s * dout * r;  // [d_out, r]
                float cj = scale * wv[bi * k + j];
                for (int64_t ti = 0; ti < t; ++ti) {
                    const float* hr = hj + ti * r;
                    float* orow = ov.data() + (bi * t + ti) * dout;
                    for (int64_t o = 0; o < dout; ++o) {
                        const float* arow = amat + o * r;
                        float acc = 0.0f;
                        for (int64_t ri = 0; ri < r; ++ri) acc += hr[ri] * arow[ri];
                        orow[o] += cj * acc;
                    }
                }
            }
        }
    }

    if (rg) {
        std::vector<float> saved_h = h;
        OpCtx::record(out, [x, a, b, w, idx, out, saved_h, bsz, t, din, dout, r, k, scale] {
            auto g = OpCtx::grad_of(out);
            auto xv = x.data();
            auto av = a.data();
            auto bv = b.data();
            auto wv = w.data();
            std::vector<float> u(static_cast<size_t>(t * r));
            for (int64_t bi = 0; bi < bsz; ++bi) {
                for (int64_t j = 0; j < k; ++j) {
                    int64_t s = idx.v[static_cast<size_t>(bi * k + j)];
                    const float* amat = av.data() + s * dout * r;
                    const float* bmat = bv.data() + s * r * din;
                    const float* hj = saved_h.data() + (bi * k + j) * t * r;
                    float wj = wv[bi * k + j];
                    // u = scale * dY[b] . A_s, shape [T, r]
                    for (int64_t ti = 0; ti < t; ++ti) {
                        const float* grow = g.data() + (bi * t + ti) * dout;
                        float* ur = u.data() + ti * r;
                        std::fill(ur, ur + r, 0.0f);
                        for (int64_t o = 0; o < dout; ++o) {
                            float go = grow[o];
                            if (go == 0.0f) continue;
                            const float* arow = amat + o * r;
                            for (int64_t ri = 0; ri < r; ++ri) ur[ri] += go * arow[ri];
                        }
                        for (int64_t ri = 0; ri < r; ++ri) ur[ri] *= scale;
                    }
                    if (w.requires_grad()) {
                        auto gw = OpCtx::grad_acc(w);
                        double acc = 0.0;
                        for (int64_t i = 0; i < t * r; ++i) acc += static_cast<double>(u[static_cast<size_t>(i)]) * hj[i];
                        gw[bi * k + j] += static_cast<float>(acc);
                    }
                    if (a.requires_grad()) {
                        // dA_s += scale * w_j * dY[b]^T . h_j
                        auto ga = OpCtx::grad_acc(a);
                        float* gamat = ga.data() + s * dout * r;
                        for (int64_t ti = 0; ti < t; ++ti) {
                            const float* grow = g.data() + (bi * t + ti) * dout;
                            const float* hr = hj + ti * r;
                            for (int64_t o = 0; o < dout; ++o) {
                                float c = scale * wj * grow[o];
                                if (c == 0.0f) continue;
                                float* garow = gamat + o * r;
                                for (int64_t ri = 0; ri < r; ++ri) garow[ri] += c * hr[ri];
                            }
                        }
                    }
                    if (b.requires_grad() || x.requires_grad()) {
                        // dh = w_j * u, then dB_s += dh^T . x[b] and dx[b] += dh . B_s
                        for (int64_t ti = 0; ti < t; ++ti) {
                            const float* ur = u.data() + ti * r;
                            const float* xr = xv.data() + (bi * t + ti) * din;
                            for (int64_t ri = 0; ri < r; ++ri) {
                                float dh = wj * ur[ri];
                                if (dh == 0.0f) continue;
                                if (b.requires_grad()) {
                                    auto gb = OpCtx::grad_acc(b);
                                    float* gbrow = gb.data() + (s * r + ri) * din;
                                    for (int64_t i = 0; i < din; ++i) gbrow[i] += dh * xr[i];
                                }
                                if (x.requires_grad()) {
                                    auto gx = OpCtx::grad_acc(x);
                                    float* gxr = gx.data() + (bi * t + ti) * din;
                                    const float* brow = bmat + ri * din;
                                    for (int64_t i = 0; i < din; ++i) gxr[i] += dh * brow[i];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor niwf_linear_forward(const Tensor& x, const Tensor& w_base, const AdapterBank& bank,
                           const GatingDecision& decision) {
    return add(linear(x, w_base), adapter_delta(x, bank, decision));
}

Tensor dense_delta_oracle(const Tensor& x, const Tensor& w_base, const AdapterBank& bank,
                          const GatingDecision& decision) {
    int64_t bsz = x.dim(0), t = x.dim(1), din = bank.d_in, dout = bank.d_out, r = bank.rank, k = decision.k;
    check_decision(bank, decision, bsz);
    float scale = bank.alpha / static_cast<float>(bank.rank);
    Tensor out = Tensor::zeros({bsz, t, dout});
    auto xv = x.data();
    auto wv = w_base.data();
    auto av = bank.a.data();
    auto bv = bank.b.data();
    auto dw = decision.weights.data();
    auto ov = out.mutable_data();
    std::vector<float> delta(static_cast<size_t>(dout * din));
    for (int64_t bi = 0; bi < bsz; ++bi) {
        std::fill(delta.begin(), delta.end(), 0.0f);
        for (int64_t j = 0; j < k; ++j) {
            int64_t s = decision.indices.v[static_cast<size_t>(bi * k + j)];
            float c = scale * dw[bi * k + j];
            const float* amat = av.data() + s * dout * r;
            const float* bmat = bv.data() + s * r * din;
            for (int64_t o = 0; o < dout; ++o) {
                for (int64_t ri = 0; ri < r; ++ri) {
                    float ar = c * amat[o * r + ri];
                    if (ar == 0.0f) continue;
                    const float* brow = bmat + ri * din;
                    float* drow = delta.data() + o * din;
                    for (int64_t i = 0; i < din; ++i) drow[i] += ar * brow[i];
                }
            }
        }
        for (int64_t ti = 0; ti < t; ++ti) {
            const float* xr = xv.data() + (bi * t + ti) * din;
            float* orow = ov.data() + (bi * t + ti) * dout;
            for (int64_t o = 0; o < dout; ++o) {
                const float* wrow = wv.data() + o * din;
                const float* drow = delta.data() + o * din;
                double acc = 0.0;
                for (int64_t i = 0; i < din; ++i) acc += static_cast<double>(xr[i]) * (wrow[i] + drow[i]);
                orow[o] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

}  // namespace niwf
