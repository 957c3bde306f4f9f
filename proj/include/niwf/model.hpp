#pragma once

#include <memory>
#include <string>
#include <vector>

#include "niwf/backbone.hpp"
#include "niwf/config.hpp"
#include "niwf/dynamics.hpp"
#include "niwf/field.hpp"
#include "niwf/optim.hpp"
#include "niwf/region.hpp"
#include "niwf/tasks.hpp"

namespace niwf {

// Full NIWF assembly: frozen backbone, per-module adapter banks, weight
// field, coordinate dynamics, and the commit store.
struct NiwfModel {
    Config config;
    Backbone backbone;
    ModuleRegistry registry;
    ModuleBanks banks;
    WeightField field;
    CoordDynamics dynamics;
    CommitStore store;
    Tensor fixed_z;  // no_dynamics mode constant, [d_z]
    Rng rng{0};      // primary stream (initialization draws)

    bool hard_lock() const { return config.mode == RunMode::NiwfHard; }

    static NiwfModel create(const Config& cfg);

    // Every parameter in deterministic order (backbone first, then banks in
    // registry order, field, dynamics).
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;

    // Slots for the currently trainable parameters, with hard-lock element
    // masks applied to committed bases. Norm gains/biases are exempt from
    // weight decay.
    std::vector<ParamSlot> trainable_slots() const;

    // Zeroes the gradients of bases whose trainable_mask is off; runs after
    // backward and before clipping so frozen bases influence nothing.
    void zero_masked_grads();

    // Recomputes every bank's trainable_mask from the union of surviving
    // committed regions (hard-lock mode).
    void refresh_hard_lock_masks();

    void freeze_dynamics();

    // Grows every bank and the field output head by `extra` bases.
    void expand_capacity(int64_t extra_bases);
};

// Gating decisions for a coordinate batch: field forward, optional
// snapshot-override of rows falling inside committed regions (hard mode),
// then per-layer top-k. `overridden`, when given, receives one flag per row.
std::vector<GatingDecision> gate_from_coords(const NiwfModel& model, const Tensor& z,
                                             std::vector<uint8_t>* overridden = nullptr);

// Builds the per-module registry mapping each "layer.module" key of wrapped
// projections onto that layer's decision.
GatingRegistry populate_registry(const NiwfModel& model, const std::vector<GatingDecision>& decisions);

struct TwoPassResult {
    Tensor nll;
    Tensor z1;  // [B, d_z]
    std::vector<GatingDecision> decisions;
    std::vector<uint8_t> overridden_rows;
};

// Pass 1 evaluates the backbone at z0 = 0 (gradient-free), pools the final
// hidden states, and advances the coordinate; pass 2 gates from z1 and
// computes the masked NLL.
TwoPassResult two_pass_forward(NiwfModel& model, const Batch& batch);

// Pass 2 only, at pinned coordinates: the committed-surface replay used to
// check hard-lock conservation. Captures every wrapped module's output.
struct ReplayResult {
    Tensor logits;
    std::vector<std::pair<std::string, Tensor>> module_outputs;
};
ReplayResult replay_with_coords(NiwfModel& model, const Batch& batch, const Tensor& z1);

// Commit the just-trained task: fit + anchors + snapshot + base mask, then
// hard-lock masking and optional dynamics freeze per config.
const CommittedRegion& commit_task(NiwfModel& model, const Tensor& task_coords, const std::string& label,
                                   int64_t created_at_step = 0);

}  // namespace niwf
