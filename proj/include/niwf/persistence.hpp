#pragma once

#include <map>
#include <string>
#include <vector>

#include "niwf/model.hpp"
#include "niwf/protocol.hpp"

namespace niwf {

// Optimizer moments captured for a mid-task checkpoint, keyed by parameter
// name in slot order.
struct OptimizerSnapshot {
    std::vector<std::string> names;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    int64_t t = 0;
};

OptimizerSnapshot snapshot_optimizer(TaskTrainer& trainer);
void restore_optimizer(TaskTrainer& trainer, const OptimizerSnapshot& snap);

// Checkpoint directory layout:
//   manifest.json  format version, config echo, run state, RNG state, and an
//                  ordered tensor index (name, shape, dtype, offset, length,
//                  checksum) into tensors.bin
//   tensors.bin    concatenated raw little-endian float32 values, row-major
//   commits.json   region metadata plus per-region blob index
//   region_<id>.bin  sigma, sigma_inv, chol, anchors, snapshot, base_mask,
//                  coords in the same raw-tensor encoding
// Round trips are bit-exact, including RNG state (seed + draw counter).
void save_checkpoint(const std::string& dir, const NiwfModel& model, const RunState& state,
                     const OptimizerSnapshot* optimizer = nullptr);

struct LoadedCheckpoint {
    NiwfModel model;
    RunState state;
    OptimizerSnapshot optimizer;
    bool has_optimizer = false;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

// Line-delimited corpus records: {"tokens": [...], "loss_mask": [...]}.
void save_corpus(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> load_corpus(const std::string& path);

uint64_t fnv1a64(const void* data, size_t len);

}  // namespace niwf
