#pragma once

#include <cstdint>
#include <vector>

#include "niwf/rng.hpp"
#include "niwf/tensor.hpp"

namespace niwf {

// Shared vocabulary for all synthetic tasks. Reserved ids never appear in
// payloads.
struct Vocab {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kBos = 1;
    static constexpr int32_t kSep = 2;
    static constexpr int32_t kFirstPayload = 3;
    int32_t size = 64;
};

// One sequence: tokens plus a mask that marks positions strictly after SEP
// (the supervised response span).
struct Example {
    std::vector<int32_t> tokens;
    std::vector<uint8_t> loss_mask;
};

struct LenRange {
    int32_t lo = 4;
    int32_t hi = 12;  // inclusive
};

// Task A analogue: BOS payload SEP payload.
std::vector<Example> gen_copy(int64_t n, LenRange len, const Vocab& vocab, Rng& rng);
// Task B analogue: BOS payload SEP reversed-payload.
std::vector<Example> gen_reverse(int64_t n, LenRange len, const Vocab& vocab, Rng& rng);
// Stage-0 pretraining corpus: BOS payload SEP payload-prefix (random truncation).
std::vector<Example> gen_neutral(int64_t n, LenRange len, const Vocab& vocab, Rng& rng);

// One training batch in next-token form: `targets[b,t]` is the token that
// follows position t, `loss_mask` selects supervised logit positions, and
// `valid` marks non-PAD token positions for attention masking.
struct Batch {
    IntArray tokens;     // [B, T]
    IntArray targets;    // [B, T]
    IntArray loss_mask;  // [B, T]
    IntArray valid;      // [B, T]
    int64_t batch() const { return tokens.shape[0]; }
    int64_t seq_len() const { return tokens.shape[1]; }
};

// Right-pads each group of `batch` examples to the longest sequence in the
// group. Shuffle order is seeded; identical seeds give identical batches.
std::vector<Batch> make_batches(const std::vector<Example>& examples, int64_t batch, int64_t t_max, Rng& rng);

// Deterministic batch plan for one epoch of training: a pure function of
// (seed, epoch), so interrupted runs can recompute the schedule exactly.
std::vector<Batch> epoch_batches(const std::vector<Example>& examples, int64_t batch, int64_t t_max,
                                 uint64_t seed, int64_t epoch);

// Batches in corpus order (no shuffle), for evaluation.
std::vector<Batch> eval_batches(const std::vector<Example>& examples, int64_t batch, int64_t t_max);

}  // namespace niwf
