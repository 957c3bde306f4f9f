#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "niwf/errors.hpp"

namespace niwf {

enum class RunMode {
    NiwfSoft,         // lock loss only (default)
    NiwfHard,         // lock loss + frozen committed bases + snapshot-override routing
    NoLock,           // lambda_lock forced to 0 after commit
    NoSep,            // lambda_sep forced to 0
    NoDynamics,       // z fixed to a seeded constant
    DenseGating,      // k = N_b
    SingleAdapterSeq  // N_b = 1, k = 1 (sequential single-adapter baseline)
};

std::string to_string(RunMode mode);
RunMode mode_from_string(const std::string& name);

// Desk-scale defaults; full-scale values from the reference setup are noted
// in the README and the analysis module's preset. Field names mirror the
// config file keys.
struct Config {
    RunMode mode = RunMode::NiwfSoft;
    uint64_t seed = 1;

    // backbone
    int64_t n_layers = 2;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t d_ff = 128;
    int64_t vocab_size = 64;
    int64_t max_seq_len = 64;

    // adapter banks
    int64_t rank = 4;
    int64_t num_bases = 8;
    int64_t top_k = 4;
    float alpha = 8.0f;
    std::vector<std::string> target_modules;  // empty = all seven projections

    // field and dynamics
    int64_t coord_dim = 8;
    int64_t field_hidden = 32;
    bool share_layers = false;
    bool freeze_dynamics_after_commit = false;

    // tasks
    int64_t train_examples = 2000;
    int64_t val_examples = 200;
    int32_t payload_min = 4;
    int32_t payload_max = 12;

    // optimization
    float learning_rate = 5e-3f;
    float pretrain_learning_rate = 3e-3f;
    float weight_decay = 0.01f;
    float grad_clip = 1.0f;
    float warmup_fraction = 0.05f;
    int64_t grad_accum = 1;
    int64_t batch_size = 8;
    int64_t steps_per_task = 400;
    int64_t pretrain_steps = 300;

    // loss weights
    float lambda_lock = 5.0f;
    float lambda_sep = 0.01f;
    float lambda_budget = 1e-4f;
    float margin = 0.0f;

    // region commitment
    int64_t anchors_per_region = 64;
    double region_quantile = 0.95;

    // paths
    std::string out_dir;
    std::string checkpoint_dir;

    std::vector<std::string> targets() const;
    void validate() const;
};

// Applies mode implications (dense_gating => k = N_b, single_adapter_seq =>
// N_b = k = 1) and validates consistency.
void normalize(Config& cfg);

Config default_config();

// Strict JSON parsing: unknown keys are rejected with the offending key named.
Config parse_config_json(const std::string& text);
Config load_config_file(const std::string& path);
std::string config_to_json(const Config& cfg);

}  // namespace niwf
