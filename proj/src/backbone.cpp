#include "niwf/backbone.hpp"

#include <cmath>

#include "niwf/optim.hpp"

namespace niwf {

const std::vector<std::string> kTargetModuleNames = {"q_proj", "k_proj",  "v_proj", "o_proj",
                                                     "gate_proj", "up_proj", "down_proj"};

void BackboneConfig::validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab <= 0 || max_seq <= 0) {
        throw ContractError("backbone config: all extents must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ContractError("backbone config: d_model " + std::to_string(d_model) +
                            " not divisible by n_heads " + std::to_string(n_heads));
    }
}

ModuleRegistry build_registry(const BackboneConfig& config) {
    config.validate();
    ModuleRegistry reg;
    for (int64_t l = 0; l < config.n_layers; ++l) {
        for (const auto& name : kTargetModuleNames) {
            RegistryEntry e;
            e.layer = l;
            e.name = name;
            if (name == "gate_proj" || name == "up_proj") {
                e.d_in = config.d_model;
                e.d_out = config.d_ff;
            } else if (name == "down_proj") {
                e.d_in = config.d_ff;
                e.d_out = config.d_model;
            } else {
                e.d_in = config.d_model;
                e.d_out = config.d_model;
            }
            reg.entries.push_back(std::move(e));
        }
    }
    return reg;
}

ModuleRegistry build_registry(int64_t n_layers,
                              const std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>>& dims) {
    ModuleRegistry reg;
    for (int64_t l = 0; l < n_layers; ++l) {
        for (const auto& [name, io] : dims) {
            reg.entries.push_back({l, name, io.first, io.second});
        }
    }
    return reg;
}

const Tensor& Backbone::module_weight(int64_t layer, const std::string& name) const {
    const BackboneLayer& bl = layers.at(static_cast<size_t>(layer));
    if (name == "q_proj") return bl.q_proj;
    if (name == "k_proj") return bl.k_proj;
    if (name == "v_proj") return bl.v_proj;
    if (name == "o_proj") return bl.o_proj;
    if (name == "gate_proj") return bl.gate_proj;
    if (name == "up_proj") return bl.up_proj;
    if (name == "down_proj") return bl.down_proj;
    throw LookupError("unknown module name: " + name);
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("backbone.tok_emb", tok_emb);
    out.emplace_back("backbone.pos_emb", pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
        std::string p = "backbone.layer" + std::to_string(l) + ".";
        const BackboneLayer& bl = layers[l];
        out.emplace_back(p + "attn_norm.gain", bl.attn_norm_gain);
        out.emplace_back(p + "q_proj.weight", bl.q_proj);
        out.emplace_back(p + "k_proj.weight", bl.k_proj);
        out.emplace_back(p + "v_proj.weight", bl.v_proj);
        out.emplace_back(p + "o_proj.weight", bl.o_proj);
        out.emplace_back(p + "mlp_norm.gain", bl.mlp_norm_gain);
        out.emplace_back(p + "gate_proj.weight", bl.gate_proj);
        out.emplace_back(p + "up_proj.weight", bl.up_proj);
        out.emplace_back(p + "down_proj.weight", bl.down_proj);
    }
    out.emplace_back("backbone.final_norm.gain", final_norm_gain);
    return out;
}

void Backbone::freeze() {
    for (auto& [name, t] : named_parameters()) {
        Tensor p = t;
        p.set_requires_grad(false);
    }
    frozen = true;
}

Backbone make_backbone(const BackboneConfig& config, Rng& rng) {
    config.validate();
    Backbone bb;
    bb.config = config;
    bb.tok_emb = Tensor::normal({config.vocab, config.d_model}, 0.0f, 0.02f, rng, true);
    bb.pos_emb = Tensor::normal({config.max_seq, config.d_model}, 0.0f, 0.02f, rng, true);
    for (int64_t l = 0; l < config.n_layers; ++l) {
        BackboneLayer bl;
        bl.attn_norm_gain = Tensor::full({config.d_model}, 1.0f, true);
        bl.q_proj = Tensor::normal({config.d_model, config.d_model}, 0.0f, 0.02f, rng, true);
        bl.k_proj = Tensor::normal({config.d_model, config.d_model}, 0.0f, 0.02f, rng, true);
        bl.v_proj = Tensor::normal({config.d_model, config.d_model}, 0.0f, 0.02f, rng, true);
        bl.o_proj = Tensor::normal({config.d_model, config.d_model}, 0.0f, 0.02f, rng, true);
        bl.mlp_norm_gain = Tensor::full({config.d_model}, 1.0f, true);
        bl.gate_proj = Tensor::normal({config.d_ff, config.d_model}, 0.0f, 0.02f, rng, true);
        bl.up_proj = Tensor::normal({config.d_ff, config.d_model}, 0.0f, 0.02f, rng, true);
        bl.down_proj = Tensor::normal({config.d_model, config.d_ff}, 0.0f, 0.02f, rng, true);
        bb.layers.push_back(std::move(bl));
    }
    bb.final_norm_gain = Tensor::full({config.d_model}, 1.0f, true);
    return bb;
}

AdapterBank* ModuleBanks::find(const std::string& key) {
    for (size_t i = 0; i < keys.size(); ++i) {
        if (keys[i] == key) return &banks[i];
    }
    return nullptr;
}

const AdapterBank* ModuleBanks::find(const std::string& key) const {
    return const_cast<ModuleBanks*>(this)->find(key);
}

namespace {

constexpr float kNormEps = 1e-5f;

Tensor wrapped_linear(const Tensor& x, const Tensor& w, const std::string& key, const ModuleBanks* banks,
                      const GatingRegistry* registry, ForwardProbe* probe) {
    Tensor out;
    const GatingDecision* decision = nullptr;
    const AdapterBank* bank = nullptr;
    if (banks != nullptr && registry != nullptr) {
        decision = registry->find(key);
        bank = banks->find(key);
    }
    if (decision != nullptr && bank != nullptr) {
        out = niwf_linear_forward(x, w, *bank, *decision);
    } else {
        out = linear(x, w);
    }
    if (probe != nullptr) probe->module_outputs.emplace_back(key, out);
    return out;
}

}  // namespace

BackboneOutput backbone_forward(const Backbone& bb, const IntArray& tokens, const IntArray& valid,
                                const ModuleBanks* banks, const GatingRegistry* registry, ForwardProbe* probe) {
    const BackboneConfig& cfg = bb.config;
    if (tokens.shape.size() != 2) throw ShapeError("backbone_forward: tokens must be [B,T]");
    int64_t b = tokens.shape[0], t = tokens.shape[1];
    if (t > cfg.max_seq) {
        throw ContractError("backbone_forward: sequence length " + std::to_string(t) + " exceeds max " +
                            std::to_string(cfg.max_seq));
    }
    if (valid.shape != tokens.shape) throw ShapeError("backbone_forward: valid mask must match tokens");

    IntArray pos_ids = IntArray::zeros({t});
    for (int64_t i = 0; i < t; ++i) pos_ids.v[static_cast<size_t>(i)] = static_cast<int32_t>(i);

    Tensor x = add(embedding(bb.tok_emb, tokens), embedding(bb.pos_emb, pos_ids));  // [B,T,D]

    int64_t h = cfg.n_heads, hd = cfg.head_dim();
    float att_scale = 1.0f / static_cast<float>(std::sqrt(static_cast<double>(hd)));

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const BackboneLayer& bl = bb.layers[static_cast<size_t>(l)];
        std::string lp = std::to_string(l) + ".";

        Tensor hin = rms_norm(x, bl.attn_norm_gain, kNormEps);
        Tensor q = wrapped_linear(hin, bl.q_proj, lp + "q_proj", banks, registry, probe);
        Tensor kk = wrapped_linear(hin, bl.k_proj, lp + "k_proj", banks, registry, probe);
        Tensor v = wrapped_linear(hin, bl.v_proj, lp + "v_proj", banks, registry, probe);

        q = transpose(reshape(q, {b, t, h, hd}), 1, 2);   // [B,H,T,hd]
        kk = transpose(reshape(kk, {b, t, h, hd}), 1, 2);
        v = transpose(reshape(v, {b, t, h, hd}), 1, 2);

        Tensor scores = mul_scalar(matmul(q, transpose(kk, 2, 3)), att_scale);  // [B,H,T,T]
        scores = attention_mask_add(scores, valid);
        Tensor attn = softmax(scores, 3);
        Tensor ctx = reshape(transpose(matmul(attn, v), 1, 2), {b, t, cfg.d_model});
        Tensor attn_out = wrapped_linear(ctx, bl.o_proj, lp + "o_proj", banks, registry, probe);
        x = add(x, attn_out);

        Tensor min = rms_norm(x, bl.mlp_norm_gain, kNormEps);
        Tensor gate = wrapped_linear(min, bl.gate_proj, lp + "gate_proj", banks, registry, probe);
        Tensor up = wrapped_linear(min, bl.up_proj, lp + "up_proj", banks, registry, probe);
        Tensor mid = mul(activation(gate, Act::Silu), up);
        Tensor down = wrapped_linear(mid, bl.down_proj, lp + "down_proj", banks, registry, probe);
        x = add(x, down);
    }

    Tensor fh = rms_norm(x, bb.final_norm_gain, kNormEps);
    Tensor logits = linear(fh, bb.tok_emb);  // tied output head
    return {logits, fh};
}

std::vector<float> pretrain_backbone(Backbone& bb, const std::vector<Example>& corpus, int64_t steps,
                                     int64_t batch_size, float peak_lr, uint64_t data_seed) {
    if (bb.frozen) throw ContractError("pretrain_backbone: backbone is already frozen");
    std::vector<ParamSlot> slots;
    for (auto& [name, t] : bb.named_parameters()) {
        bool no_decay = name.find("norm") != std::string::npos;
        slots.push_back({t, no_decay, {}});
    }
    AdamWConfig acfg;
    acfg.weight_decay = 0.01f;
    AdamW opt(slots, acfg);
    Schedule sched{peak_lr, steps, 0.05f};

    std::vector<float> nll_trace;
    nll_trace.reserve(static_cast<size_t>(steps));
    int64_t step = 0, epoch = 0;
    while (step < steps) {
        auto batches = epoch_batches(corpus, batch_size, bb.config.max_seq, data_seed, epoch);
        for (const Batch& batch : batches) {
            if (step >= steps) break;
            Tape tape;
            BackboneOutput out = backbone_forward(bb, batch.tokens, batch.valid);
            Tensor loss = cross_entropy_nll(out.logits, batch.targets, batch.loss_mask);
            tape.backward(loss);
            clip_grad_norm(slots, 1.0f);
            opt.step(lr_at_step(sched, std::min(step + 1, steps)));
            opt.zero_grad();
            nll_trace.push_back(loss.item());
            ++step;
        }
        ++epoch;
    }
    bb.freeze();
    return nll_trace;
}

}  // namespace niwf
