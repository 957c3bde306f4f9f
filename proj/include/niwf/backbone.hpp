#pragma once

#include <string>
#include <vector>

#include "niwf/adapters.hpp"
#include "niwf/tasks.hpp"
#include "niwf/tensor.hpp"

namespace niwf {

struct BackboneConfig {
    int64_t n_layers = 2;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t d_ff = 128;
    int64_t vocab = 64;
    int64_t max_seq = 64;
    int64_t head_dim() const { return d_model / n_heads; }
    void validate() const;
};

// The seven wrapped projections of one transformer layer, in registry order.
extern const std::vector<std::string> kTargetModuleNames;

struct RegistryEntry {
    int64_t layer = 0;
    std::string name;
    int64_t d_in = 0;
    int64_t d_out = 0;
    std::string key() const { return std::to_string(layer) + "." + name; }
};

// Ordered list of every wrapped projection; size is always L x (#targets).
struct ModuleRegistry {
    std::vector<RegistryEntry> entries;
    size_t size() const { return entries.size(); }
};

ModuleRegistry build_registry(const BackboneConfig& config);
// Registry for an explicit (d_in, d_out) table, used by the memory analysis
// at full scale.
ModuleRegistry build_registry(int64_t n_layers, const std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>>& dims);

struct BackboneLayer {
    Tensor attn_norm_gain;
    Tensor q_proj, k_proj, v_proj, o_proj;  // [d_model, d_model]
    Tensor mlp_norm_gain;
    Tensor gate_proj, up_proj;  // [d_ff, d_model]
    Tensor down_proj;           // [d_model, d_ff]
};

// Decoder-only toy transformer with Mistral-shaped blocks: pre-RMSNorm,
// causal attention, silu-gated MLP, output head tied to the token embedding.
// Learned absolute position embeddings.
struct Backbone {
    BackboneConfig config;
    Tensor tok_emb;  // [V, d_model], also the output head
    Tensor pos_emb;  // [T_max, d_model]
    std::vector<BackboneLayer> layers;
    Tensor final_norm_gain;
    bool frozen = false;

    const Tensor& module_weight(int64_t layer, const std::string& name) const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    void freeze();
};

Backbone make_backbone(const BackboneConfig& config, Rng& rng);

// Banks for every registry entry, in registry order.
struct ModuleBanks {
    std::vector<std::string> keys;
    std::vector<AdapterBank> banks;
    AdapterBank* find(const std::string& key);
    const AdapterBank* find(const std::string& key) const;
};

struct BackboneOutput {
    Tensor logits;        // [B, T, V]
    Tensor final_hidden;  // [B, T, d_model], post final norm
};

// Captures the output of every wrapped projection, in execution order.
struct ForwardProbe {
    std::vector<std::pair<std::string, Tensor>> module_outputs;
};

// Runs the causal language model. When `banks` and `registry` are supplied,
// every wrapped projection adds its gated adapter delta; otherwise (or for
// modules without a gating entry) the plain base projection runs.
BackboneOutput backbone_forward(const Backbone& bb, const IntArray& tokens, const IntArray& valid,
                                const ModuleBanks* banks = nullptr, const GatingRegistry* registry = nullptr,
                                ForwardProbe* probe = nullptr);

// Stage-0 substitute for a pretrained checkpoint: trains next-token NLL on
// the neutral corpus for `steps`, then freezes every backbone parameter
// permanently. Calling it on a frozen backbone is an error.
std::vector<float> pretrain_backbone(Backbone& bb, const std::vector<Example>& corpus, int64_t steps,
                                     int64_t batch_size, float peak_lr, uint64_t data_seed);

}  // namespace niwf
