#include "niwf/model.hpp"

#include <algorithm>

namespace niwf {

NiwfModel NiwfModel::create(const Config& cfg_in) {
    Config cfg = cfg_in;
    normalize(cfg);
    NiwfModel m;
    m.config = cfg;
    m.rng = Rng(cfg.seed);
    Rng init = m.rng.split("init");

    BackboneConfig bc;
    bc.n_layers = cfg.n_layers;
    bc.d_model = cfg.d_model;
    bc.n_heads = cfg.n_heads;
    bc.d_ff = cfg.d_ff;
    bc.vocab = cfg.vocab_size;
    bc.max_seq = cfg.max_seq_len;
    m.backbone = make_backbone(bc, init);

    ModuleRegistry full = build_registry(bc);
    auto wanted = cfg.targets();
    for (const auto& e : full.entries) {
        if (std::find(wanted.begin(), wanted.end(), e.name) == wanted.end()) continue;
        m.registry.entries.push_back(e);
        m.banks.keys.push_back(e.key());
        m.banks.banks.push_back(init_bank(e.d_in, e.d_out, cfg.rank, cfg.num_bases, cfg.alpha, init));
    }

    m.field = make_field(cfg.coord_dim, cfg.field_hidden, cfg.n_layers, cfg.num_bases, cfg.share_layers, init);
    m.dynamics = make_dynamics(cfg.d_model, cfg.coord_dim, init);

    if (cfg.mode == RunMode::NoDynamics) {
        Rng zr = m.rng.split("fixed_z");
        m.fixed_z = Tensor::uniform({cfg.coord_dim}, -0.9f, 0.9f, zr);
    }
    return m;
}

std::vector<std::pair<std::string, Tensor>> NiwfModel::named_parameters() const {
    auto out = backbone.named_parameters();
    for (size_t i = 0; i < banks.keys.size(); ++i) {
        out.emplace_back("bank." + banks.keys[i] + ".A", banks.banks[i].a);
        out.emplace_back("bank." + banks.keys[i] + ".B", banks.banks[i].b);
    }
    for (auto& p : field.named_parameters()) out.push_back(p);
    for (auto& p : dynamics.named_parameters()) out.push_back(p);
    return out;
}

namespace {

std::vector<uint8_t> bank_update_mask(const AdapterBank& bank, int64_t per_base) {
    bool all = std::all_of(bank.trainable_mask.begin(), bank.trainable_mask.end(),
                           [](uint8_t f) { return f != 0; });
    if (all) return {};
    std::vector<uint8_t> mask(static_cast<size_t>(bank.num_bases * per_base));
    for (int64_t b = 0; b < bank.num_bases; ++b) {
        std::fill(mask.begin() + b * per_base, mask.begin() + (b + 1) * per_base,
                  bank.trainable_mask[static_cast<size_t>(b)]);
    }
    return mask;
}

}  // namespace

std::vector<ParamSlot> NiwfModel::trainable_slots() const {
    std::vector<ParamSlot> slots;
    for (const auto& bank : banks.banks) {
        slots.push_back({bank.a, false, bank_update_mask(bank, bank.d_out * bank.rank)});
        slots.push_back({bank.b, false, bank_update_mask(bank, bank.rank * bank.d_in)});
    }
    for (auto& [name, t] : field.named_parameters()) {
        bool no_decay = name.find(".b") != std::string::npos || name.find("ln.") != std::string::npos;
        if (t.requires_grad()) slots.push_back({t, no_decay, {}});
    }
    for (auto& [name, t] : dynamics.named_parameters()) {
        bool no_decay = name.find(".b_") != std::string::npos || name.find("ln.") != std::string::npos;
        if (t.requires_grad()) slots.push_back({t, no_decay, {}});
    }
    return slots;
}

void NiwfModel::zero_masked_grads() {
    for (auto& bank : banks.banks) {
        bool all = std::all_of(bank.trainable_mask.begin(), bank.trainable_mask.end(),
                               [](uint8_t f) { return f != 0; });
        if (all) continue;
        Tensor a = bank.a;
        Tensor b = bank.b;
        if (a.has_grad()) {
            auto g = a.grad_buffer();
            int64_t per = bank.d_out * bank.rank;
            for (int64_t base = 0; base < bank.num_bases; ++base) {
                if (bank.trainable_mask[static_cast<size_t>(base)]) continue;
                std::fill(g.begin() + base * per, g.begin() + (base + 1) * per, 0.0f);
            }
        }
        if (b.has_grad()) {
            auto g = b.grad_buffer();
            int64_t per = bank.rank * bank.d_in;
            for (int64_t base = 0; base < bank.num_bases; ++base) {
                if (bank.trainable_mask[static_cast<size_t>(base)]) continue;
                std::fill(g.begin() + base * per, g.begin() + (base + 1) * per, 0.0f);
            }
        }
    }
}

void NiwfModel::refresh_hard_lock_masks() {
    for (size_t bi = 0; bi < banks.banks.size(); ++bi) {
        auto& bank = banks.banks[bi];
        bank.trainable_mask.assign(static_cast<size_t>(bank.num_bases), 1);
    }
    for (const auto& region : store.regions) {
        for (size_t bi = 0; bi < banks.banks.size(); ++bi) {
            int64_t layer = registry.entries[bi].layer;
            if (layer >= region.n_layers) continue;
            auto& bank = banks.banks[bi];
            int64_t nb = std::min(bank.num_bases, region.num_bases);
            for (int64_t b = 0; b < nb; ++b) {
                if (region.base_mask[static_cast<size_t>(layer * region.num_bases + b)]) {
                    bank.trainable_mask[static_cast<size_t>(b)] = 0;
                }
            }
        }
    }
}

void NiwfModel::freeze_dynamics() {
    for (auto& [name, t] : dynamics.named_parameters()) {
        Tensor p = t;
        p.set_requires_grad(false);
    }
}

void NiwfModel::expand_capacity(int64_t extra_bases) {
    Rng er = rng.split("expand").split(static_cast<uint64_t>(field.num_bases));
    for (auto& bank : banks.banks) bank = expand_bank(bank, extra_bases, er);
    expand_field_output(field, extra_bases);
    config.num_bases += extra_bases;
    if (config.mode == RunMode::DenseGating) config.top_k = config.num_bases;
    if (hard_lock()) refresh_hard_lock_masks();
}

std::vector<GatingDecision> gate_from_coords(const NiwfModel& model, const Tensor& z,
                                             std::vector<uint8_t>* overridden) {
    Tensor logits = field_forward(model.field, z);  // [B, L, N_b]
    int64_t b = z.dim(0);
    std::vector<uint8_t> flags(static_cast<size_t>(b), 0);
    if (model.hard_lock() && !model.store.empty()) {
        int64_t layers = model.field.n_layers, nb = model.field.num_bases;
        Tensor overrides = Tensor::full({b, layers, nb}, -10.0f);
        auto zv = z.data();
        auto ov = overrides.mutable_data();
        int64_t dz = z.dim(1);
        bool any = false;
        for (int64_t row = 0; row < b; ++row) {
            std::span<const float> zrow{zv.data() + row * dz, static_cast<size_t>(dz)};
            const CommittedRegion* region = find_containing(model.store, zrow);
            if (region == nullptr) continue;
            int64_t j = nearest_anchor(*region, zrow);
            auto sv = region->snapshot.data();
            for (int64_t l = 0; l < std::min(layers, region->n_layers); ++l) {
                for (int64_t nbi = 0; nbi < std::min(nb, region->num_bases); ++nbi) {
                    ov[(row * layers + l) * nb + nbi] =
                        sv[(j * region->n_layers + l) * region->num_bases + nbi];
                }
            }
            flags[static_cast<size_t>(row)] = 1;
            any = true;
        }
        if (any) logits = override_rows(logits, flags, overrides);
    }
    if (overridden != nullptr) *overridden = flags;
    return gate_topk(logits, model.config.top_k);
}

GatingRegistry populate_registry(const NiwfModel& model, const std::vector<GatingDecision>& decisions) {
    GatingRegistry reg;
    std::vector<std::shared_ptr<const GatingDecision>> shared;
    shared.reserve(decisions.size());
    for (const auto& d : decisions) shared.push_back(std::make_shared<const GatingDecision>(d));
    for (const auto& e : model.registry.entries) {
        reg.set(e.key(), shared[static_cast<size_t>(e.layer)]);
    }
    return reg;
}

namespace {

Tensor broadcast_fixed_z(const Tensor& fixed_z, int64_t b) {
    int64_t d = fixed_z.numel();
    Tensor out = Tensor::zeros({b, d});
    auto src = fixed_z.data();
    auto dst = out.mutable_data();
    for (int64_t i = 0; i < b; ++i) std::copy(src.begin(), src.end(), dst.begin() + i * d);
    return out;
}

}  // namespace

TwoPassResult two_pass_forward(NiwfModel& model, const Batch& batch) {
    int64_t b = batch.batch();
    int64_t dz = model.config.coord_dim;

    Tensor z1;
    if (model.config.mode == RunMode::NoDynamics) {
        z1 = broadcast_fixed_z(model.fixed_z, b);
    } else {
        Tensor pooled;
        {
            NoGrad ng;
            Tensor z0 = Tensor::zeros({b, dz});
            auto decisions0 = gate_from_coords(model, z0);
            GatingRegistry reg0 = populate_registry(model, decisions0);
            BackboneOutput out0 = backbone_forward(model.backbone, batch.tokens, batch.valid, &model.banks, &reg0);
            pooled = mean_pool(out0.final_hidden);  // built gradient-free: already detached
        }
        Tensor z0 = Tensor::zeros({b, dz});
        z1 = coord_update(model.dynamics, z0, pooled);
    }

    TwoPassResult result;
    result.z1 = z1;
    result.decisions = gate_from_coords(model, z1, &result.overridden_rows);
    GatingRegistry reg = populate_registry(model, result.decisions);
    BackboneOutput out = backbone_forward(model.backbone, batch.tokens, batch.valid, &model.banks, &reg);
    result.nll = cross_entropy_nll(out.logits, batch.targets, batch.loss_mask);
    return result;
}

ReplayResult replay_with_coords(NiwfModel& model, const Batch& batch, const Tensor& z1) {
    NoGrad ng;
    auto decisions = gate_from_coords(model, z1);
    GatingRegistry reg = populate_registry(model, decisions);
    ForwardProbe probe;
    BackboneOutput out = backbone_forward(model.backbone, batch.tokens, batch.valid, &model.banks, &reg, &probe);
    return {out.logits, std::move(probe.module_outputs)};
}

const CommittedRegion& commit_task(NiwfModel& model, const Tensor& task_coords, const std::string& label,
                                   int64_t created_at_step) {
    Rng crng = Rng(model.config.seed).split("commit").split(label);
    CommittedRegion region =
        commit_region(model.field, task_coords, model.config.top_k, model.config.anchors_per_region,
                      model.config.region_quantile, crng, label, model.store.next_id, created_at_step);
    model.store.regions.push_back(std::move(region));
    model.store.next_id++;
    if (model.hard_lock()) model.refresh_hard_lock_masks();
    if (model.config.freeze_dynamics_after_commit) model.freeze_dynamics();
    return model.store.regions.back();
}

}  // namespace niwf
